//! Flat run configuration.
//!
//! Every tunable is addressable by a dotted key, settable from a `key =
//! value` config file and overridable by command-line flags. Unknown keys
//! are rejected. The full effective configuration is echoed into every
//! output manifest, and its hash identifies the run.

use std::collections::BTreeMap;
use std::path::Path;

use eaglepc_core::eagle::{EmbedSpan, EmbedSpec, ScaleMode};
use eaglepc_core::engine::{EagleConfig, MemScoreConfig, SoftmaxScope, UnlearnConfig};
use eaglepc_core::eval::{EvalConfig, RougeMode};
use eaglepc_core::model::{ArchConfig, EmbedRepr, LossReduction, OptimKind, TrainConfig};
use eaglepc_core::objectives::{ObjectiveConfig, ObjectiveKind};
use eaglepc_core::proxy::{HttpConfig, PenaltyConfig, PenaltyMode};
use eaglepc_core::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("config line {line} is not `key = value`")]
    BadLine { line: usize },
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyBackendKind {
    Stub,
    File,
    Http,
}

impl std::str::FromStr for ProxyBackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stub" => Ok(ProxyBackendKind::Stub),
            "file" => Ok(ProxyBackendKind::File),
            "http" => Ok(ProxyBackendKind::Http),
            other => Err(format!("unknown proxy backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // corpus.*
    pub corpus_seed: u64,
    pub corpus_entities: usize,
    pub corpus_qa_per_entity: usize,
    pub corpus_forget_ratio: f64,
    pub corpus_holdout_entities: usize,
    pub corpus_facts_entities: usize,
    // arch.*
    pub arch_d_model: usize,
    pub arch_layers: usize,
    pub arch_heads: usize,
    pub arch_max_len: usize,
    pub arch_loss_reduction: LossReduction,
    // train.*
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_optimizer: OptimKind,
    pub train_seed: u64,
    pub train_init_seed: u64,
    // objective.*
    pub objective_kind: ObjectiveKind,
    pub objective_alpha: f64,
    pub objective_beta: f64,
    pub objective_m: usize,
    pub objective_n: usize,
    // eagle.*
    pub eagle_enabled: bool,
    pub eagle_k: f64,
    pub eagle_scale: ScaleMode,
    pub eagle_embed_repr: EmbedRepr,
    pub eagle_embed_span: EmbedSpan,
    pub eagle_scope: SoftmaxScope,
    pub eagle_tolerate_zero: bool,
    // penalty.* / proxy.*
    pub penalty_mu: f64,
    pub penalty_mode: PenaltyMode,
    pub proxy_backend: ProxyBackendKind,
    pub proxy_file: String,
    pub proxy_model: String,
    pub proxy_timeout_secs: u64,
    pub proxy_retries: usize,
    // unlearn.*
    pub unlearn_steps: usize,
    pub unlearn_epochs: usize,
    pub unlearn_lr: f64,
    pub unlearn_seed: u64,
    pub unlearn_checkpoint_every: usize,
    // eval.*
    pub eval_min_k: f64,
    pub eval_verbmem_prefix: usize,
    pub eval_max_new: usize,
    pub eval_rouge: RougeMode,
    pub eval_label: String,
    // mem.*
    pub mem_d_model: usize,
    pub mem_layers: usize,
    pub mem_heads: usize,
    pub mem_epochs: usize,
    pub mem_lr: f64,
    pub mem_batch: usize,
    pub mem_seeds: usize,
    pub mem_records: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_seed: 42,
            corpus_entities: 40,
            corpus_qa_per_entity: 5,
            corpus_forget_ratio: 0.10,
            corpus_holdout_entities: 4,
            corpus_facts_entities: 20,
            arch_d_model: 64,
            arch_layers: 2,
            arch_heads: 2,
            arch_max_len: 96,
            arch_loss_reduction: LossReduction::Mean,
            train_epochs: 24,
            train_lr: 1.5e-3,
            train_batch: 16,
            train_optimizer: OptimKind::Adam,
            train_seed: 42,
            train_init_seed: 42,
            objective_kind: ObjectiveKind::NpoGd,
            objective_alpha: 1.0,
            objective_beta: 2.5,
            objective_m: 8,
            objective_n: 8,
            eagle_enabled: true,
            eagle_k: 1.0,
            eagle_scale: ScaleMode::Softmax,
            eagle_embed_repr: EmbedRepr::Hidden,
            eagle_embed_span: EmbedSpan::FullSample,
            eagle_scope: SoftmaxScope::Minibatch,
            eagle_tolerate_zero: false,
            penalty_mu: 0.005,
            penalty_mode: PenaltyMode::Cap,
            proxy_backend: ProxyBackendKind::Stub,
            proxy_file: String::new(),
            proxy_model: "gpt-4o".into(),
            proxy_timeout_secs: 30,
            proxy_retries: 2,
            unlearn_steps: 0,
            unlearn_epochs: 2,
            unlearn_lr: 3e-3,
            unlearn_seed: 42,
            unlearn_checkpoint_every: 0,
            eval_min_k: 20.0,
            eval_verbmem_prefix: 16,
            eval_max_new: 48,
            eval_rouge: RougeMode::F1,
            eval_label: String::new(),
            mem_d_model: 32,
            mem_layers: 1,
            mem_heads: 2,
            mem_epochs: 3,
            mem_lr: 2e-3,
            mem_batch: 16,
            mem_seeds: 8,
            mem_records: 20,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(ConfigError::BadValue {
            key: key.to_string(),
            message: format!("expected a boolean, got `{other}`"),
        }),
    }
}

fn parse_variant<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_string())).map_err(|e| {
        ConfigError::BadValue {
            key: key.to_string(),
            message: e.to_string(),
        }
    })
}

impl RunConfig {
    /// Set one dotted key; unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "corpus.seed" => self.corpus_seed = parse(key, value)?,
            "corpus.entities" => self.corpus_entities = parse(key, value)?,
            "corpus.qa_per_entity" => self.corpus_qa_per_entity = parse(key, value)?,
            "corpus.forget_ratio" => self.corpus_forget_ratio = parse(key, value)?,
            "corpus.holdout_entities" => self.corpus_holdout_entities = parse(key, value)?,
            "corpus.facts_entities" => self.corpus_facts_entities = parse(key, value)?,
            "arch.d_model" => self.arch_d_model = parse(key, value)?,
            "arch.layers" => self.arch_layers = parse(key, value)?,
            "arch.heads" => self.arch_heads = parse(key, value)?,
            "arch.max_len" => self.arch_max_len = parse(key, value)?,
            "arch.loss_reduction" => self.arch_loss_reduction = parse_variant(key, value)?,
            "train.epochs" => self.train_epochs = parse(key, value)?,
            "train.lr" => self.train_lr = parse(key, value)?,
            "train.batch" => self.train_batch = parse(key, value)?,
            "train.optimizer" => self.train_optimizer = parse_variant(key, value)?,
            "train.seed" => self.train_seed = parse(key, value)?,
            "train.init_seed" => self.train_init_seed = parse(key, value)?,
            "objective.kind" => {
                self.objective_kind = value.trim().parse().map_err(|e: String| {
                    ConfigError::BadValue {
                        key: key.to_string(),
                        message: e,
                    }
                })?
            }
            "objective.alpha" => self.objective_alpha = parse(key, value)?,
            "objective.beta" => self.objective_beta = parse(key, value)?,
            "objective.m" => self.objective_m = parse(key, value)?,
            "objective.n" => self.objective_n = parse(key, value)?,
            "eagle.enabled" => self.eagle_enabled = parse_bool(key, value)?,
            "eagle.k" => self.eagle_k = parse(key, value)?,
            "eagle.scale" => self.eagle_scale = parse_variant(key, value)?,
            "eagle.embed_repr" => self.eagle_embed_repr = parse_variant(key, value)?,
            "eagle.embed_span" => self.eagle_embed_span = parse_variant(key, value)?,
            "eagle.scope" => self.eagle_scope = parse_variant(key, value)?,
            "eagle.tolerate_zero" => self.eagle_tolerate_zero = parse_bool(key, value)?,
            "penalty.mu" => self.penalty_mu = parse(key, value)?,
            "penalty.mode" => {
                self.penalty_mode = value.trim().parse().map_err(|e: String| {
                    ConfigError::BadValue {
                        key: key.to_string(),
                        message: e,
                    }
                })?
            }
            "proxy.backend" => {
                self.proxy_backend = value.trim().parse().map_err(|e: String| {
                    ConfigError::BadValue {
                        key: key.to_string(),
                        message: e,
                    }
                })?
            }
            "proxy.file" => self.proxy_file = value.trim().to_string(),
            "proxy.model" => self.proxy_model = value.trim().to_string(),
            "proxy.timeout_secs" => self.proxy_timeout_secs = parse(key, value)?,
            "proxy.retries" => self.proxy_retries = parse(key, value)?,
            "unlearn.steps" => self.unlearn_steps = parse(key, value)?,
            "unlearn.epochs" => self.unlearn_epochs = parse(key, value)?,
            "unlearn.lr" => self.unlearn_lr = parse(key, value)?,
            "unlearn.seed" => self.unlearn_seed = parse(key, value)?,
            "unlearn.checkpoint_every" => self.unlearn_checkpoint_every = parse(key, value)?,
            "eval.min_k" => self.eval_min_k = parse(key, value)?,
            "eval.verbmem_prefix" => self.eval_verbmem_prefix = parse(key, value)?,
            "eval.max_new" => self.eval_max_new = parse(key, value)?,
            "eval.rouge" => {
                self.eval_rouge = value.trim().parse().map_err(|e: String| {
                    ConfigError::BadValue {
                        key: key.to_string(),
                        message: e,
                    }
                })?
            }
            "eval.label" => self.eval_label = value.trim().to_string(),
            "mem.d_model" => self.mem_d_model = parse(key, value)?,
            "mem.layers" => self.mem_layers = parse(key, value)?,
            "mem.heads" => self.mem_heads = parse(key, value)?,
            "mem.epochs" => self.mem_epochs = parse(key, value)?,
            "mem.lr" => self.mem_lr = parse(key, value)?,
            "mem.batch" => self.mem_batch = parse(key, value)?,
            "mem.seeds" => self.mem_seeds = parse(key, value)?,
            "mem.records" => self.mem_records = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Merge a `key = value` file (UTF-8, `#` comments).
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine { line: i + 1 })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every key with its effective value, sorted; the manifest echo.
    pub fn effective(&self) -> BTreeMap<String, String> {
        fn variant<T: serde::Serialize>(v: &T) -> String {
            match serde_json::to_value(v).expect("variant serializes") {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            }
        }
        let mut out = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("corpus.seed", self.corpus_seed.to_string());
        put("corpus.entities", self.corpus_entities.to_string());
        put("corpus.qa_per_entity", self.corpus_qa_per_entity.to_string());
        put("corpus.forget_ratio", self.corpus_forget_ratio.to_string());
        put(
            "corpus.holdout_entities",
            self.corpus_holdout_entities.to_string(),
        );
        put(
            "corpus.facts_entities",
            self.corpus_facts_entities.to_string(),
        );
        put("arch.d_model", self.arch_d_model.to_string());
        put("arch.layers", self.arch_layers.to_string());
        put("arch.heads", self.arch_heads.to_string());
        put("arch.max_len", self.arch_max_len.to_string());
        put("arch.loss_reduction", variant(&self.arch_loss_reduction));
        put("train.epochs", self.train_epochs.to_string());
        put("train.lr", self.train_lr.to_string());
        put("train.batch", self.train_batch.to_string());
        put("train.optimizer", variant(&self.train_optimizer));
        put("train.seed", self.train_seed.to_string());
        put("train.init_seed", self.train_init_seed.to_string());
        put("objective.kind", self.objective_kind.to_string());
        put("objective.alpha", self.objective_alpha.to_string());
        put("objective.beta", self.objective_beta.to_string());
        put("objective.m", self.objective_m.to_string());
        put("objective.n", self.objective_n.to_string());
        put("eagle.enabled", self.eagle_enabled.to_string());
        put("eagle.k", self.eagle_k.to_string());
        put("eagle.scale", variant(&self.eagle_scale));
        put("eagle.embed_repr", variant(&self.eagle_embed_repr));
        put("eagle.embed_span", variant(&self.eagle_embed_span));
        put("eagle.scope", variant(&self.eagle_scope));
        put("eagle.tolerate_zero", self.eagle_tolerate_zero.to_string());
        put("penalty.mu", self.penalty_mu.to_string());
        put("penalty.mode", variant(&self.penalty_mode));
        put(
            "proxy.backend",
            match self.proxy_backend {
                ProxyBackendKind::Stub => "stub".into(),
                ProxyBackendKind::File => "file".into(),
                ProxyBackendKind::Http => "http".into(),
            },
        );
        put("proxy.file", self.proxy_file.clone());
        put("proxy.model", self.proxy_model.clone());
        put("proxy.timeout_secs", self.proxy_timeout_secs.to_string());
        put("proxy.retries", self.proxy_retries.to_string());
        put("unlearn.steps", self.unlearn_steps.to_string());
        put("unlearn.epochs", self.unlearn_epochs.to_string());
        put("unlearn.lr", self.unlearn_lr.to_string());
        put("unlearn.seed", self.unlearn_seed.to_string());
        put(
            "unlearn.checkpoint_every",
            self.unlearn_checkpoint_every.to_string(),
        );
        put("eval.min_k", self.eval_min_k.to_string());
        put("eval.verbmem_prefix", self.eval_verbmem_prefix.to_string());
        put("eval.max_new", self.eval_max_new.to_string());
        put("eval.rouge", variant(&self.eval_rouge));
        put("eval.label", self.eval_label.clone());
        put("mem.d_model", self.mem_d_model.to_string());
        put("mem.layers", self.mem_layers.to_string());
        put("mem.heads", self.mem_heads.to_string());
        put("mem.epochs", self.mem_epochs.to_string());
        put("mem.lr", self.mem_lr.to_string());
        put("mem.batch", self.mem_batch.to_string());
        put("mem.seeds", self.mem_seeds.to_string());
        put("mem.records", self.mem_records.to_string());
        out
    }

    /// Hash of the canonical `key = value` listing.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.effective() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        sha256_hex(text.as_bytes())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            charset: eaglepc_core::vocab::STANDARD_CHARSET.to_string(),
            d_model: self.arch_d_model,
            n_layers: self.arch_layers,
            n_heads: self.arch_heads,
            max_len: self.arch_max_len,
            loss_reduction: self.arch_loss_reduction,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            lr: self.train_lr,
            batch_size: self.train_batch,
            optimizer: self.train_optimizer,
            seed: self.train_seed,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.objective_kind,
            alpha: self.objective_alpha,
            beta: self.objective_beta,
            forget_batch: self.objective_m,
            retain_batch: self.objective_n,
        }
    }

    pub fn eagle(&self) -> EagleConfig {
        EagleConfig {
            enabled: self.eagle_enabled,
            k: self.eagle_k,
            scale: self.eagle_scale,
            embed: EmbedSpec {
                repr: self.eagle_embed_repr,
                span: self.eagle_embed_span,
            },
            scope: self.eagle_scope,
            tolerate_zero: self.eagle_tolerate_zero,
        }
    }

    pub fn penalty(&self) -> PenaltyConfig {
        PenaltyConfig {
            mu: self.penalty_mu,
            mode: self.penalty_mode,
        }
    }

    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            model: self.proxy_model.clone(),
            timeout_secs: self.proxy_timeout_secs,
            retries: self.proxy_retries,
        }
    }

    /// The unlearning config; `steps = 0` derives the step count as
    /// `unlearn.epochs` passes over the forget set.
    pub fn unlearn(&self, forget_len: usize) -> UnlearnConfig {
        let steps = if self.unlearn_steps > 0 {
            self.unlearn_steps
        } else {
            let per_epoch = forget_len.div_ceil(self.objective_m).max(1);
            per_epoch * self.unlearn_epochs
        };
        UnlearnConfig {
            objective: self.objective(),
            eagle: self.eagle(),
            penalty: self.penalty(),
            steps,
            lr: self.unlearn_lr,
            seed: self.unlearn_seed,
            checkpoint_every: (self.unlearn_checkpoint_every > 0)
                .then_some(self.unlearn_checkpoint_every),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            min_k_percent: self.eval_min_k,
            verbmem_prefix: self.eval_verbmem_prefix,
            max_new: self.eval_max_new,
            rouge: self.eval_rouge,
        }
    }

    pub fn memscore(&self) -> MemScoreConfig {
        MemScoreConfig {
            arch: ArchConfig {
                charset: eaglepc_core::vocab::STANDARD_CHARSET.to_string(),
                d_model: self.mem_d_model,
                n_layers: self.mem_layers,
                n_heads: self.mem_heads,
                max_len: self.arch_max_len,
                loss_reduction: self.arch_loss_reduction,
            },
            train: TrainConfig {
                epochs: self.mem_epochs,
                lr: self.mem_lr,
                batch_size: self.mem_batch,
                optimizer: OptimKind::Adam,
                seed: self.train_seed,
            },
            n_seeds: self.mem_seeds,
            max_new: self.eval_max_new,
        }
    }
}
