//! Proxy answers and the over-forgetting penalty.
//!
//! A proxy sample pairs a forget question with a plausible answer the model
//! would be expected to give had it never trained on the record. During
//! unlearning, the loss on the real answer is compared against the loss on
//! the proxy answer; the penalty activates when forgetting overshoots that
//! reference and pulls the trajectory back.
//!
//! Penalty modes: the source statements of this mechanism disagree on the
//! hinge direction, so all readings are implemented and selectable:
//! - `cap` (default): penalize when the real-answer loss exceeds the proxy
//!   loss, `mu * max(0, f(z) - f(z_test))`.
//! - `floor`: the mirrored hinge, `mu * max(0, f(z_test) - f(z))`.
//! - `symmetric`: `mu * |f(z) - f(z_test)|`.
//! - `literal-alg3`: `mu * (f(z) - f(z_test))` gated on `f(z) < f(z_test)`
//!   (a negative contribution; kept so the discrepancy stays testable).

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{AttributePool, QARecord};
use crate::model::{self, LmError, ModelParams};
use crate::par;
use crate::rng::SeededRng;

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("no proxy answer for record `{0}`")]
    MissingProxy(String),
    #[error("proxy file has no entry for ids: {0:?}")]
    FileMissingIds(Vec<String>),
    #[error("proxy file line {line}: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("proxy backend request failed for ids {ids:?}: {message}")]
    Backend { ids: Vec<String>, message: String },
    #[error("penalty weight must be finite and non-negative, got {0}")]
    BadMu(f64),
    #[error("proxy/batch mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    File,
    Stub,
    Http,
}

/// A forget question paired with its proxy answer `y_test`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySample {
    pub id: String,
    pub question: String,
    pub proxy_answer: String,
    pub provenance: Provenance,
}

/// Hinge direction of the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    #[default]
    Cap,
    Floor,
    Symmetric,
    LiteralAlg3,
}

impl std::str::FromStr for PenaltyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cap" => Ok(PenaltyMode::Cap),
            "floor" => Ok(PenaltyMode::Floor),
            "symmetric" => Ok(PenaltyMode::Symmetric),
            "literal-alg3" => Ok(PenaltyMode::LiteralAlg3),
            other => Err(format!("unknown penalty mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub mu: f64,
    pub mode: PenaltyMode,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            mu: 0.005,
            mode: PenaltyMode::Cap,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), ProxyError> {
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(ProxyError::BadMu(self.mu));
        }
        Ok(())
    }
}

/// Penalty value plus the coefficients of its gradient through each loss:
/// `dP/df_i` for the forget losses and `dP/dg_i` for the proxy losses.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTerms {
    pub value: f64,
    pub d_forget: Vec<f64>,
    pub d_proxy: Vec<f64>,
}

impl PenaltyTerms {
    pub fn zero(n: usize) -> Self {
        PenaltyTerms {
            value: 0.0,
            d_forget: vec![0.0; n],
            d_proxy: vec![0.0; n],
        }
    }

    /// True where the proxy loss actually contributes gradient.
    pub fn any_active(&self) -> bool {
        self.d_proxy.iter().any(|&d| d != 0.0)
    }
}

/// Penalty from precomputed per-sample losses `f(z_i)` and `g_i = f(z_test)`.
pub fn penalty_terms(
    forget_losses: &[f64],
    proxy_losses: &[f64],
    cfg: &PenaltyConfig,
) -> Result<PenaltyTerms, ProxyError> {
    cfg.validate()?;
    if forget_losses.len() != proxy_losses.len() {
        return Err(ProxyError::Mismatch(format!(
            "{} forget losses vs {} proxy losses",
            forget_losses.len(),
            proxy_losses.len()
        )));
    }
    let n = forget_losses.len();
    let mut terms = PenaltyTerms::zero(n);
    if cfg.mu == 0.0 {
        return Ok(terms);
    }
    for i in 0..n {
        let (f, g) = (forget_losses[i], proxy_losses[i]);
        match cfg.mode {
            PenaltyMode::Cap => {
                if f > g {
                    terms.value += cfg.mu * (f - g);
                    terms.d_forget[i] = cfg.mu;
                    terms.d_proxy[i] = -cfg.mu;
                }
            }
            PenaltyMode::Floor => {
                if g > f {
                    terms.value += cfg.mu * (g - f);
                    terms.d_forget[i] = -cfg.mu;
                    terms.d_proxy[i] = cfg.mu;
                }
            }
            PenaltyMode::Symmetric => {
                let sign = if f >= g { 1.0 } else { -1.0 };
                terms.value += cfg.mu * (f - g).abs();
                terms.d_forget[i] = cfg.mu * sign;
                terms.d_proxy[i] = -cfg.mu * sign;
            }
            PenaltyMode::LiteralAlg3 => {
                if f < g {
                    terms.value += cfg.mu * (f - g);
                    terms.d_forget[i] = cfg.mu;
                    terms.d_proxy[i] = -cfg.mu;
                }
            }
        }
    }
    Ok(terms)
}

/// Penalty `P(xi_t, mu)` for a forget batch, computing both loss sides under
/// `params_t`. Proxies must cover every batch member (matched by id).
pub fn penalty(
    params_t: &ModelParams,
    batch: &[QARecord],
    proxies: &[ProxySample],
    cfg: &PenaltyConfig,
) -> Result<f64, ProxyError> {
    cfg.validate()?;
    let by_id: BTreeMap<&str, &ProxySample> =
        proxies.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut aligned = Vec::with_capacity(batch.len());
    for r in batch {
        match by_id.get(r.id.as_str()) {
            Some(p) => aligned.push(*p),
            None => return Err(ProxyError::MissingProxy(r.id.clone())),
        }
    }
    let forget_losses: Vec<f64> =
        par::ordered_map(batch, |r| model::sample_nll(params_t, &r.question, &r.answer))
            .into_iter()
            .collect::<Result<_, _>>()?;
    let proxy_losses: Vec<f64> = par::ordered_map(&aligned, |p| {
        model::sample_nll(params_t, &p.question, &p.proxy_answer)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    Ok(penalty_terms(&forget_losses, &proxy_losses, cfg)?.value)
}

/// A proxy-answer backend.
pub trait ProxyGenerator {
    /// Produce one proxy per record, order-aligned with the input.
    fn generate(&self, batch: &[QARecord]) -> Result<Vec<ProxySample>, ProxyError>;
}

/// Deterministic attribute-swap generator.
///
/// Finds the pool value embedded in the record's answer and swaps it for a
/// different value from the same pool, chosen by a stream seeded from the
/// record id. Answers with no recognizable pool value pass through
/// unchanged, so the stub never fails.
pub struct StubGenerator {
    pools: Vec<AttributePool>,
}

impl StubGenerator {
    pub fn new(pools: Vec<AttributePool>) -> Self {
        StubGenerator { pools }
    }
}

impl ProxyGenerator for StubGenerator {
    fn generate(&self, batch: &[QARecord]) -> Result<Vec<ProxySample>, ProxyError> {
        let out = batch
            .iter()
            .map(|r| {
                let hit = self
                    .pools
                    .iter()
                    .flat_map(|p| p.values.iter().map(move |v| (p, v)))
                    .filter(|(_, v)| r.answer.contains(v.as_str()))
                    .max_by_key(|(_, v)| v.len());
                let proxy_answer = match hit {
                    Some((pool, truth)) => {
                        let mut alternatives: Vec<&String> =
                            pool.values.iter().filter(|v| *v != truth).collect();
                        alternatives.sort();
                        let mut rng = SeededRng::new(0).derive(&format!("proxy-stub/{}", r.id));
                        let pick = alternatives[rng.index(alternatives.len())];
                        r.answer.replace(truth.as_str(), pick)
                    }
                    None => r.answer.clone(),
                };
                ProxySample {
                    id: r.id.clone(),
                    question: r.question.clone(),
                    proxy_answer,
                    provenance: Provenance::Stub,
                }
            })
            .collect();
        Ok(out)
    }
}

/// Proxies preloaded from a JSONL file keyed by record id.
pub struct FileGenerator {
    by_id: BTreeMap<String, ProxySample>,
}

impl FileGenerator {
    pub fn load(path: &Path) -> Result<Self, ProxyError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut by_id = BTreeMap::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: ProxySample = serde_json::from_str(&line)
                .map_err(|source| ProxyError::MalformedLine { line: i + 1, source })?;
            by_id.insert(sample.id.clone(), sample);
        }
        Ok(FileGenerator { by_id })
    }
}

impl ProxyGenerator for FileGenerator {
    fn generate(&self, batch: &[QARecord]) -> Result<Vec<ProxySample>, ProxyError> {
        let missing: Vec<String> = batch
            .iter()
            .filter(|r| !self.by_id.contains_key(&r.id))
            .map(|r| r.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ProxyError::FileMissingIds(missing));
        }
        Ok(batch.iter().map(|r| self.by_id[&r.id].clone()).collect())
    }
}

/// Write proxies as line-delimited JSON (the [`FileGenerator`] input format).
pub fn write_proxies(path: &Path, proxies: &[ProxySample]) -> Result<(), ProxyError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in proxies {
        serde_json::to_writer(&mut out, p)
            .map_err(|source| ProxyError::MalformedLine { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Few-shot exemplar for the chat prompt: question, real answer, and the
/// answer expected from a model that never saw the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub real_answer: String,
    pub expected_answer: String,
}

/// Environment variable naming the chat-completion endpoint.
pub const ENDPOINT_ENV: &str = "EAGLEPC_PROXY_ENDPOINT";
/// Environment variable holding the bearer token (optional).
pub const KEY_ENV: &str = "EAGLEPC_PROXY_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub model: String,
    pub timeout_secs: u64,
    pub retries: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            model: "gpt-4o".into(),
            timeout_secs: 30,
            retries: 2,
        }
    }
}

/// Generic chat-completion client. Batches the whole forget batch into one
/// prompt: few-shot `(question, real, expected)` triples followed by the
/// numbered target questions, answers parsed back by number.
pub struct HttpGenerator {
    endpoint: String,
    api_key: Option<String>,
    cfg: HttpConfig,
    exemplars: Vec<Exemplar>,
}

impl HttpGenerator {
    pub fn new(
        endpoint: String,
        api_key: Option<String>,
        cfg: HttpConfig,
        exemplars: Vec<Exemplar>,
    ) -> Self {
        HttpGenerator {
            endpoint,
            api_key,
            cfg,
            exemplars,
        }
    }

    /// Read endpoint and key from the environment.
    pub fn from_env(cfg: HttpConfig, exemplars: Vec<Exemplar>) -> Result<Self, ProxyError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| ProxyError::Backend {
            ids: vec![],
            message: format!("{ENDPOINT_ENV} is not set"),
        })?;
        let api_key = std::env::var(KEY_ENV).ok();
        Ok(HttpGenerator::new(endpoint, api_key, cfg, exemplars))
    }

    fn build_prompt(&self, batch: &[QARecord]) -> String {
        let mut prompt = String::from(
            "You are asked how a model would answer questions about authors it was never \
             trained on. Answer in the same sentence format as the real answers, but with a \
             plausible different value.\n\n",
        );
        for ex in &self.exemplars {
            prompt.push_str(&format!(
                "Question: {}\nReal answer: {}\nExpected answer: {}\n\n",
                ex.question, ex.real_answer, ex.expected_answer
            ));
        }
        prompt.push_str(
            "Now answer each question below with one expected answer per line, prefixed by \
             its number:\n",
        );
        for (i, r) in batch.iter().enumerate() {
            prompt.push_str(&format!("{}. {}\n", i + 1, r.question));
        }
        prompt
    }

    fn parse_numbered(content: &str, n: usize) -> Vec<Option<String>> {
        let mut out = vec![None; n];
        for line in content.lines() {
            let line = line.trim();
            for (i, slot) in out.iter_mut().enumerate() {
                let a = format!("{}.", i + 1);
                let b = format!("{})", i + 1);
                if let Some(rest) = line
                    .strip_prefix(&a)
                    .or_else(|| line.strip_prefix(&b))
                {
                    let text = rest.trim();
                    if !text.is_empty() && slot.is_none() {
                        *slot = Some(text.to_string());
                    }
                }
            }
        }
        out
    }

    fn request_once(&self, prompt: &str) -> Result<String, String> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = ureq::post(&self.endpoint)
            .timeout(Duration::from_secs(self.cfg.timeout_secs));
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let response = req.send_json(body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = response.into_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl ProxyGenerator for HttpGenerator {
    fn generate(&self, batch: &[QARecord]) -> Result<Vec<ProxySample>, ProxyError> {
        let ids: Vec<String> = batch.iter().map(|r| r.id.clone()).collect();
        let prompt = self.build_prompt(batch);
        let mut last_err = String::new();
        for _ in 0..=self.cfg.retries {
            match self.request_once(&prompt) {
                Ok(content) => {
                    let parsed = Self::parse_numbered(&content, batch.len());
                    let missing: Vec<String> = parsed
                        .iter()
                        .zip(&ids)
                        .filter(|(p, _)| p.is_none())
                        .map(|(_, id)| id.clone())
                        .collect();
                    if !missing.is_empty() {
                        return Err(ProxyError::Backend {
                            ids: missing,
                            message: "response missing numbered answers".into(),
                        });
                    }
                    return Ok(batch
                        .iter()
                        .zip(parsed)
                        .map(|(r, p)| ProxySample {
                            id: r.id.clone(),
                            question: r.question.clone(),
                            proxy_answer: p.unwrap(),
                            provenance: Provenance::Http,
                        })
                        .collect());
                }
                Err(e) => last_err = e,
            }
        }
        Err(ProxyError::Backend {
            ids,
            message: last_err,
        })
    }
}

/// Caching front for a generator: each record id is generated at most once,
/// so re-requesting a batch is a no-op.
pub struct ProxyService {
    generator: Box<dyn ProxyGenerator + Send + Sync>,
    cache: BTreeMap<String, ProxySample>,
}

impl ProxyService {
    pub fn new(generator: Box<dyn ProxyGenerator + Send + Sync>) -> Self {
        ProxyService {
            generator,
            cache: BTreeMap::new(),
        }
    }

    /// One proxy per forget record, order-aligned with the batch; uncached
    /// ids are fetched in a single backend call.
    pub fn generate_proxies(&mut self, batch: &[QARecord]) -> Result<Vec<ProxySample>, ProxyError> {
        let missing: Vec<QARecord> = batch
            .iter()
            .filter(|r| !self.cache.contains_key(&r.id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            for p in self.generator.generate(&missing)? {
                self.cache.insert(p.id.clone(), p);
            }
        }
        batch
            .iter()
            .map(|r| {
                self.cache
                    .get(&r.id)
                    .cloned()
                    .ok_or_else(|| ProxyError::MissingProxy(r.id.clone()))
            })
            .collect()
    }

    pub fn cached(&self) -> impl Iterator<Item = &ProxySample> {
        self.cache.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_pools, generate_world, WorldSpec};

    #[test]
    fn penalty_arithmetic_per_mode() {
        let cap = PenaltyConfig {
            mu: 0.005,
            mode: PenaltyMode::Cap,
        };
        // Real-answer loss above the proxy loss: hinge active.
        let t = penalty_terms(&[2.0], &[1.5], &cap).unwrap();
        assert!((t.value - 0.0025).abs() < 1e-15);
        assert_eq!(t.d_forget, vec![0.005]);
        assert_eq!(t.d_proxy, vec![-0.005]);
        // Below: inactive.
        let t = penalty_terms(&[1.0], &[1.5], &cap).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(!t.any_active());
        // Floor mirrors the hinge.
        let floor = PenaltyConfig {
            mu: 0.005,
            mode: PenaltyMode::Floor,
        };
        let t = penalty_terms(&[1.0], &[1.5], &floor).unwrap();
        assert!((t.value - 0.0025).abs() < 1e-15);
        // Symmetric pays on both sides.
        let sym = PenaltyConfig {
            mu: 2.0,
            mode: PenaltyMode::Symmetric,
        };
        let t = penalty_terms(&[1.0, 2.0], &[1.5, 1.5], &sym).unwrap();
        assert!((t.value - 2.0).abs() < 1e-15);
        // The literal reading accumulates a negative term when f < g.
        let lit = PenaltyConfig {
            mu: 1.0,
            mode: PenaltyMode::LiteralAlg3,
        };
        let t = penalty_terms(&[1.0], &[1.5], &lit).unwrap();
        assert!((t.value + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_mu_is_zero_everywhere() {
        for mode in [
            PenaltyMode::Cap,
            PenaltyMode::Floor,
            PenaltyMode::Symmetric,
            PenaltyMode::LiteralAlg3,
        ] {
            let cfg = PenaltyConfig { mu: 0.0, mode };
            let t = penalty_terms(&[3.0, 0.1], &[0.5, 2.0], &cfg).unwrap();
            assert_eq!(t.value, 0.0);
            assert_eq!(t.d_forget, vec![0.0, 0.0]);
            assert_eq!(t.d_proxy, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn negative_mu_is_rejected() {
        let cfg = PenaltyConfig {
            mu: -0.1,
            mode: PenaltyMode::Cap,
        };
        assert!(matches!(
            penalty_terms(&[1.0], &[1.0], &cfg),
            Err(ProxyError::BadMu(_))
        ));
    }

    fn genre_record() -> QARecord {
        let records = generate_world(&WorldSpec::new(3, 4, 1)).unwrap();
        records
            .into_iter()
            .find(|r| r.answer.contains("French Literature"))
            .unwrap_or_else(|| {
                // Force a deterministic genre record if the sampled world
                // happens not to contain this value.
                let mut r = generate_world(&WorldSpec::new(3, 4, 1)).unwrap().remove(0);
                r.answer = format!("{} writes French Literature.", r.entity);
                r
            })
    }

    #[test]
    fn stub_swaps_attribute_within_pool() {
        let record = genre_record();
        let stub = StubGenerator::new(default_pools());
        let proxies = stub.generate(std::slice::from_ref(&record)).unwrap();
        let p = &proxies[0];
        assert_eq!(p.id, record.id);
        assert_ne!(p.proxy_answer, record.answer);
        assert!(!p.proxy_answer.contains("French Literature"));
        let genres = &default_pools()[0].values;
        assert!(
            genres
                .iter()
                .any(|g| g != "French Literature" && p.proxy_answer.contains(g.as_str())),
            "proxy answer should use another genre: {}",
            p.proxy_answer
        );
        // Deterministic per id.
        let again = stub.generate(std::slice::from_ref(&record)).unwrap();
        assert_eq!(proxies, again);
    }

    #[test]
    fn file_round_trip_and_missing_id() {
        let records = generate_world(&WorldSpec::new(5, 4, 2)).unwrap();
        let stub = StubGenerator::new(default_pools());
        let proxies = stub.generate(&records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxies.jsonl");
        write_proxies(&path, &proxies).unwrap();
        let file_gen = FileGenerator::load(&path).unwrap();
        assert_eq!(file_gen.generate(&records).unwrap(), proxies);

        let mut stranger = records[0].clone();
        stranger.id = "missing-id".into();
        match file_gen.generate(&[stranger]) {
            Err(ProxyError::FileMissingIds(ids)) => assert_eq!(ids, vec!["missing-id"]),
            other => panic!("expected missing ids, got {other:?}"),
        }
    }

    #[test]
    fn cache_makes_regeneration_a_noop() {
        let records = generate_world(&WorldSpec::new(5, 4, 2)).unwrap();
        let counter = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        struct Shared(std::sync::Arc<std::sync::atomic::AtomicUsize>);
        impl ProxyGenerator for Shared {
            fn generate(&self, batch: &[QARecord]) -> Result<Vec<ProxySample>, ProxyError> {
                self.0.fetch_add(batch.len(), std::sync::atomic::Ordering::SeqCst);
                Ok(batch
                    .iter()
                    .map(|r| ProxySample {
                        id: r.id.clone(),
                        question: r.question.clone(),
                        proxy_answer: "x.".into(),
                        provenance: Provenance::Stub,
                    })
                    .collect())
            }
        }
        let mut service = ProxyService::new(Box::new(Shared(counter.clone())));
        let first = service.generate_proxies(&records).unwrap();
        let second = service.generate_proxies(&records).unwrap();
        assert_eq!(first, second);
        assert_eq!(
            counter.load(std::sync::atomic::Ordering::SeqCst),
            records.len(),
            "second call must hit the cache"
        );
    }

    #[test]
    fn numbered_answer_parsing() {
        let content = "1. Alpha writes Satire.\n2) Beta was born in Oslo.\nnoise\n";
        let parsed = HttpGenerator::parse_numbered(content, 3);
        assert_eq!(parsed[0].as_deref(), Some("Alpha writes Satire."));
        assert_eq!(parsed[1].as_deref(), Some("Beta was born in Oslo."));
        assert_eq!(parsed[2], None);
    }
}
