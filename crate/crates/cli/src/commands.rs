//! Subcommand bodies. Each command reads its inputs, runs the corresponding
//! engine call, and writes fixed-name artifacts under `--out`, together with
//! a `manifest.json` echoing the effective configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use eaglepc_core::checkpoint::{self, Manifest};
use eaglepc_core::corpus::{self, CorpusSplits, QARecord, WorldSpec};
use eaglepc_core::engine;
use eaglepc_core::eval::{self, EvalReport};
use eaglepc_core::model::{self, ModelParams};
use eaglepc_core::proxy::{
    Exemplar, FileGenerator, HttpGenerator, ProxyGenerator, ProxySample, ProxyService,
    StubGenerator,
};
use eaglepc_core::rng::SeededRng;
use eaglepc_core::util::sha256_hex;

use crate::config::{ProxyBackendKind, RunConfig};

pub struct CommandCtx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl CommandCtx {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn write_manifest(
        &self,
        command: &str,
        inputs: BTreeMap<String, String>,
        outputs: Vec<String>,
    ) -> Result<()> {
        #[derive(Serialize)]
        struct RunManifest<'a> {
            command: &'a str,
            config_hash: String,
            config: BTreeMap<String, String>,
            inputs: BTreeMap<String, String>,
            outputs: Vec<String>,
        }
        let manifest = RunManifest {
            command,
            config_hash: self.cfg.hash(),
            config: self.cfg.effective(),
            inputs,
            outputs,
        };
        self.write(
            "manifest.json",
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(())
    }
}

fn read_corpus(path: &Path) -> Result<(Vec<QARecord>, CorpusSplits, String)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let hash = sha256_hex(&bytes);
    let records = corpus::read_records(path)?;
    let splits = CorpusSplits::from_records(&records);
    Ok((records, splits, hash))
}

fn load_ckpt(path: &Path, corpus_hash: &str) -> Result<checkpoint::Checkpoint> {
    let ckpt =
        checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if !ckpt.manifest.corpus_hash.is_empty()
        && !corpus_hash.is_empty()
        && ckpt.manifest.corpus_hash != corpus_hash
    {
        bail!(
            "checkpoint {} was produced on a different corpus ({} vs {})",
            path.display(),
            ckpt.manifest.corpus_hash,
            corpus_hash
        );
    }
    Ok(ckpt)
}

pub fn gen_corpus(ctx: &CommandCtx) -> Result<()> {
    let cfg = &ctx.cfg;
    let spec = WorldSpec::new(
        cfg.corpus_seed,
        cfg.corpus_entities,
        cfg.corpus_qa_per_entity,
    );
    let records = corpus::generate_world(&spec)?;
    let mut rng = SeededRng::new(cfg.corpus_seed).derive("splits");
    let splits = corpus::make_splits(
        &records,
        cfg.corpus_forget_ratio,
        cfg.corpus_holdout_entities,
        &mut rng,
    )?;
    let corpus_path = ctx.out.join("corpus.jsonl");
    std::fs::create_dir_all(&ctx.out)?;
    corpus::write_records(&corpus_path, &splits.tagged_records())?;

    // Auxiliary world for the third utility group, from disjoint name pools.
    let mut facts_spec = WorldSpec::new(
        SeededRng::new(cfg.corpus_seed).derive("worldfacts").seed(),
        cfg.corpus_facts_entities,
        cfg.corpus_qa_per_entity,
    );
    facts_spec.alternate_names = true;
    let mut facts = corpus::generate_world(&facts_spec)?;
    for r in &mut facts {
        r.split = corpus::Split::Holdout;
    }
    let facts_path = ctx.out.join("worldfacts.jsonl");
    corpus::write_records(&facts_path, &facts)?;

    let corpus_hash = sha256_hex(&std::fs::read(&corpus_path)?);
    let facts_hash = sha256_hex(&std::fs::read(&facts_path)?);
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus_hash".into(), corpus_hash);
    inputs.insert("worldfacts_hash".into(), facts_hash);
    ctx.write_manifest(
        "gen-corpus",
        inputs,
        vec!["corpus.jsonl".into(), "worldfacts.jsonl".into()],
    )?;
    println!(
        "corpus: {} records ({} forget / {} retain / {} holdout)",
        records.len(),
        splits.forget.len(),
        splits.retain.len(),
        splits.holdout.len()
    );
    Ok(())
}

fn train_common(ctx: &CommandCtx, corpus_path: &Path, retain_only: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let (_, splits, corpus_hash) = read_corpus(corpus_path)?;
    let init = ModelParams::init(cfg.arch(), cfg.train_init_seed)?;
    let pairs = if retain_only {
        corpus::qa_pairs(&splits.retain)
    } else {
        corpus::qa_pairs(&splits.trained())
    };
    if pairs.is_empty() {
        bail!("no training records in {}", corpus_path.display());
    }
    let result = model::finetune(&init, &pairs, &cfg.train())?;

    let mut losses_csv = String::from("epoch,mean_loss\n");
    for (i, l) in result.epoch_losses.iter().enumerate() {
        losses_csv.push_str(&format!("{i},{l}\n"));
    }
    ctx.write("losses.csv", losses_csv.as_bytes())?;

    let steps = result.epoch_losses.len() as u64
        * (pairs.len().div_ceil(cfg.train_batch.max(1))) as u64;
    let mut manifest = Manifest::new(cfg.arch(), cfg.hash(), corpus_hash, steps);
    manifest.metrics = Some(serde_json::json!({
        "final_epoch_loss": result.epoch_losses.last().copied(),
        "records": pairs.len(),
    }));
    let ckpt_path = ctx.out.join("model.ckpt");
    std::fs::create_dir_all(&ctx.out)?;
    checkpoint::save(&ckpt_path, &result.params, &manifest)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".into(), corpus_path.display().to_string());
    inputs.insert("corpus_hash".into(), manifest.corpus_hash.clone());
    ctx.write_manifest(
        if retain_only { "retrain" } else { "finetune" },
        inputs,
        vec!["model.ckpt".into(), "losses.csv".into()],
    )?;

    if let Some((epoch, step)) = result.diverged_at {
        bail!("training diverged at epoch {epoch}, step {step}; last finite checkpoint saved");
    }
    println!(
        "trained {} records for {} epochs, final mean loss {:.4}",
        pairs.len(),
        result.epoch_losses.len(),
        result.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn finetune(ctx: &CommandCtx, corpus_path: &Path) -> Result<()> {
    train_common(ctx, corpus_path, false)
}

pub fn retrain(ctx: &CommandCtx, corpus_path: &Path) -> Result<()> {
    train_common(ctx, corpus_path, true)
}

/// Few-shot exemplars for the HTTP backend: retain records with stub-swapped
/// expected answers, mirroring the question/real/expected triple format.
fn http_exemplars(splits: &CorpusSplits) -> Vec<Exemplar> {
    let stub = StubGenerator::new(corpus::default_pools());
    splits
        .retain
        .iter()
        .take(3)
        .filter_map(|r| {
            let proxies = stub.generate(std::slice::from_ref(r)).ok()?;
            Some(Exemplar {
                question: r.question.clone(),
                real_answer: r.answer.clone(),
                expected_answer: proxies[0].proxy_answer.clone(),
            })
        })
        .collect()
}

fn proxy_service_for(ctx: &CommandCtx, splits: &CorpusSplits) -> Result<ProxyService> {
    let cfg = &ctx.cfg;
    let generator: Box<dyn ProxyGenerator + Send + Sync> = match cfg.proxy_backend {
        ProxyBackendKind::Stub => Box::new(StubGenerator::new(corpus::default_pools())),
        ProxyBackendKind::File => {
            if cfg.proxy_file.is_empty() {
                bail!("proxy.backend = file requires proxy.file");
            }
            Box::new(FileGenerator::load(Path::new(&cfg.proxy_file))?)
        }
        ProxyBackendKind::Http => Box::new(HttpGenerator::from_env(
            cfg.http(),
            http_exemplars(splits),
        )?),
    };
    Ok(ProxyService::new(generator))
}

pub fn unlearn(ctx: &CommandCtx, corpus_path: &Path, ckpt_path: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let (_, splits, corpus_hash) = read_corpus(corpus_path)?;
    if splits.forget.is_empty() {
        bail!("corpus has no forget split");
    }
    let ckpt = load_ckpt(ckpt_path, &corpus_hash)?;
    let theta0 = ckpt.params;

    let ucfg = cfg.unlearn(splits.forget.len());
    let mut service = if ucfg.penalty.mu > 0.0 {
        Some(proxy_service_for(ctx, &splits)?)
    } else {
        None
    };
    let outcome = engine::unlearn(&theta0, &splits, &ucfg, service.as_mut())?;

    std::fs::create_dir_all(&ctx.out)?;
    ctx.write("steps.csv", engine::step_log_csv(&outcome.log).as_bytes())?;

    if ucfg.eagle.enabled {
        // Diagnostics: weights of the full forget set under the starting
        // model.
        let retain_embedding =
            eaglepc_core::eagle::retain_embedding_init(&theta0, &splits.retain, ucfg.eagle.embed)?;
        let weights = eaglepc_core::eagle::eagle_weights(
            &retain_embedding,
            &splits.forget,
            &theta0,
            ucfg.eagle.k,
            ucfg.eagle.scale,
            ucfg.eagle.embed,
            ucfg.eagle.tolerate_zero,
        )?;
        ctx.write("weights.csv", weights.to_csv().as_bytes())?;
    }

    if let Some(service) = &service {
        let proxies: Vec<&ProxySample> = service.cached().collect();
        let mut text = String::new();
        for p in proxies {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        ctx.write("proxies.jsonl", text.as_bytes())?;
    }

    let mut manifest = Manifest::new(
        theta0.arch().clone(),
        cfg.hash(),
        corpus_hash,
        outcome.log.len() as u64,
    );
    manifest.metrics = Some(serde_json::json!({
        "objective": cfg.objective_kind.to_string(),
        "steps": outcome.log.len(),
        "final_forget_loss": outcome.log.last().map(|r| r.forget_loss),
        "aborted": outcome.aborted.as_ref().map(|a| format!("{a:?}")),
    }));
    checkpoint::save(&ctx.out.join("model.ckpt"), &outcome.params, &manifest)?;
    for (step, params) in &outcome.snapshots {
        let mut m = manifest.clone();
        m.step = *step as u64;
        checkpoint::save(&ctx.out.join(format!("model-step{step}.ckpt")), params, &m)?;
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".into(), corpus_path.display().to_string());
    inputs.insert("corpus_hash".into(), manifest.corpus_hash.clone());
    inputs.insert("ckpt".into(), ckpt_path.display().to_string());
    ctx.write_manifest(
        "unlearn",
        inputs,
        vec!["model.ckpt".into(), "steps.csv".into()],
    )?;

    if let Some(reason) = outcome.aborted {
        bail!("unlearning aborted ({reason:?}); last finite checkpoint saved");
    }
    println!(
        "unlearned with {} for {} steps (final forget loss {:.4})",
        cfg.objective_kind,
        outcome.log.len(),
        outcome.log.last().map(|r| r.forget_loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ctx: &CommandCtx,
    corpus_path: &Path,
    ckpt_path: &Path,
    retrain_ckpt_path: &Path,
    world_facts_path: Option<&Path>,
) -> Result<()> {
    // Keep the producing run's step log next to the report so `compare` can
    // merge loss curves across methods.
    let steps_src = ckpt_path.with_file_name("steps.csv");
    let copied_steps = steps_src.exists();
    if copied_steps {
        std::fs::create_dir_all(&ctx.out)?;
        std::fs::copy(&steps_src, ctx.out.join("steps.csv"))?;
    }
    let cfg = &ctx.cfg;
    let (_, splits, corpus_hash) = read_corpus(corpus_path)?;
    let default_facts = corpus_path.with_file_name("worldfacts.jsonl");
    let facts_path = world_facts_path.unwrap_or(&default_facts);
    let facts = corpus::read_records(facts_path)
        .with_context(|| format!("reading world facts {}", facts_path.display()))?;
    let ckpt = load_ckpt(ckpt_path, &corpus_hash)?;
    let retrain_ckpt = load_ckpt(retrain_ckpt_path, &corpus_hash)?;

    let label = if cfg.eval_label.is_empty() {
        "model".to_string()
    } else {
        cfg.eval_label.clone()
    };
    let mut report = eval::evaluate(
        &ckpt.params,
        &retrain_ckpt.params,
        &splits,
        &facts,
        &label,
        &cfg.eval(),
    )?;
    report.config_hash = cfg.hash();
    report.corpus_hash = corpus_hash.clone();
    ctx.write("report.json", report.to_json().as_bytes())?;

    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".into(), corpus_path.display().to_string());
    inputs.insert("corpus_hash".into(), corpus_hash);
    inputs.insert("ckpt".into(), ckpt_path.display().to_string());
    inputs.insert("retrain_ckpt".into(), retrain_ckpt_path.display().to_string());
    let mut outputs = vec!["report.json".to_string()];
    if copied_steps {
        outputs.push("steps.csv".into());
    }
    ctx.write_manifest("eval", inputs, outputs)?;
    println!(
        "{label}: forget quality p = {:.4}, model utility = {:.4}",
        report.forget_quality.p, report.model_utility.value
    );
    Ok(())
}

/// The memorization-score side of the comparison harness.
#[derive(Debug, Serialize, Deserialize)]
pub struct MemscoreFile {
    pub kind: String,
    pub label: String,
    pub config_hash: String,
    pub corpus_hash: String,
    /// Spearman rank correlation between effective weight and memorization.
    pub spearman: f64,
    pub samples: Vec<MemscoreSample>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MemscoreSample {
    pub id: String,
    pub mem_score: f64,
    pub with_accuracy: f64,
    pub without_accuracy: f64,
    pub weight: f64,
    pub cosine: f64,
    pub grad_norm: f64,
    /// `weight * grad_norm`: the sample's effective forgetting contribution.
    pub effective: f64,
}

pub fn memscore(ctx: &CommandCtx, corpus_path: &Path, ckpt_path: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let (_, splits, corpus_hash) = read_corpus(corpus_path)?;
    if splits.forget.is_empty() {
        bail!("corpus has no forget split");
    }
    let ckpt = load_ckpt(ckpt_path, &corpus_hash)?;
    let theta0 = ckpt.params;

    let n = cfg.mem_records.min(splits.forget.len());
    let target_ids: Vec<String> = splits.forget[..n].iter().map(|r| r.id.clone()).collect();
    let trained = splits.trained();
    let scores = engine::memorization_scores(&trained, &target_ids, &cfg.memscore())?;
    let profile = engine::weight_gradnorm_profile(&theta0, &splits, &cfg.eagle())?;
    let by_id: BTreeMap<&str, &engine::WeightProfile> =
        profile.iter().map(|p| (p.id.as_str(), p)).collect();

    let samples: Vec<MemscoreSample> = scores
        .iter()
        .map(|s| {
            let p = by_id
                .get(s.id.as_str())
                .ok_or_else(|| anyhow!("no weight profile for {}", s.id))?;
            Ok(MemscoreSample {
                id: s.id.clone(),
                mem_score: s.score,
                with_accuracy: s.with_accuracy,
                without_accuracy: s.without_accuracy,
                weight: p.weight,
                cosine: p.cosine,
                grad_norm: p.grad_norm,
                effective: p.effective,
            })
        })
        .collect::<Result<_>>()?;
    let effective: Vec<f64> = samples.iter().map(|s| s.effective).collect();
    let mem: Vec<f64> = samples.iter().map(|s| s.mem_score).collect();
    let spearman = eval::spearman(&effective, &mem)?;

    let label = if cfg.eval_label.is_empty() {
        "memscore".to_string()
    } else {
        cfg.eval_label.clone()
    };
    let file = MemscoreFile {
        kind: "memscore".into(),
        label,
        config_hash: cfg.hash(),
        corpus_hash: corpus_hash.clone(),
        spearman,
        samples,
    };
    ctx.write(
        "memscore.json",
        serde_json::to_string_pretty(&file)?.as_bytes(),
    )?;

    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".into(), corpus_path.display().to_string());
    inputs.insert("corpus_hash".into(), corpus_hash);
    inputs.insert("ckpt".into(), ckpt_path.display().to_string());
    ctx.write_manifest("memscore", inputs, vec!["memscore.json".into()])?;
    println!(
        "memscore over {} samples x {} seeds: spearman(effective weight, memorization) = {:.4}",
        file.samples.len(),
        cfg.mem_seeds,
        spearman
    );
    Ok(())
}

enum CompareInput {
    Report(Box<EvalReport>, PathBuf),
    Memscore(MemscoreFile),
}

pub fn compare(ctx: &CommandCtx, inputs: &[PathBuf]) -> Result<()> {
    if inputs.len() < 2 {
        bail!("compare needs at least two report files");
    }
    let mut parsed = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("eval_report") => parsed.push(CompareInput::Report(
                Box::new(EvalReport::from_json(&text)?),
                path.clone(),
            )),
            Some("memscore") => parsed.push(CompareInput::Memscore(serde_json::from_str(&text)?)),
            other => bail!("{}: unknown report kind {:?}", path.display(), other),
        }
    }

    // Refuse cross-corpus comparisons.
    let hashes: Vec<(&str, String)> = parsed
        .iter()
        .map(|p| match p {
            CompareInput::Report(r, _) => (r.label.as_str(), r.corpus_hash.clone()),
            CompareInput::Memscore(m) => (m.label.as_str(), m.corpus_hash.clone()),
        })
        .collect();
    if let Some(first) = hashes.iter().find(|(_, h)| !h.is_empty()) {
        for (label, h) in &hashes {
            if !h.is_empty() && h != &first.1 {
                bail!(
                    "corpus hash mismatch: `{}` has {} but `{}` has {}",
                    first.0,
                    first.1,
                    label,
                    h
                );
            }
        }
    }

    // Retrain row first, then input order.
    let mut reports: Vec<&EvalReport> = Vec::new();
    for p in &parsed {
        if let CompareInput::Report(r, _) = p {
            if r.label.to_ascii_lowercase().contains("retrain") {
                reports.push(r);
            }
        }
    }
    for p in &parsed {
        if let CompareInput::Report(r, _) = p {
            if !r.label.to_ascii_lowercase().contains("retrain") {
                reports.push(r);
            }
        }
    }

    let mut table = String::new();
    if !reports.is_empty() {
        table.push_str("## Forgetting and utility\n\n");
        table.push_str(&eval::tofu_table(&reports));
        table.push_str("\n## Memorization criteria\n\n");
        table.push_str(&eval::muse_table(&reports));
    }
    let memscores: Vec<&MemscoreFile> = parsed
        .iter()
        .filter_map(|p| match p {
            CompareInput::Memscore(m) => Some(m),
            _ => None,
        })
        .collect();
    if !memscores.is_empty() {
        table.push_str("\n## Weight vs memorization\n\n");
        table.push_str("| Run | Samples | Spearman (effective weight, memorization) |\n");
        table.push_str("|---|---|---|\n");
        for m in &memscores {
            table.push_str(&format!(
                "| {} | {} | {:.4} |\n",
                m.label,
                m.samples.len(),
                m.spearman
            ));
        }
    }
    ctx.write("table.md", table.as_bytes())?;
    let mut outputs = vec!["table.md".to_string()];

    // Merge sibling step logs for loss-curve plotting.
    let mut steps_csv = String::from("method,step,forget_loss,retain_loss,penalty\n");
    let mut have_steps = false;
    for p in &parsed {
        if let CompareInput::Report(r, path) = p {
            let sibling = path.with_file_name("steps.csv");
            if let Ok(text) = std::fs::read_to_string(&sibling) {
                for line in text.lines().skip(1) {
                    let cols: Vec<&str> = line.split(',').collect();
                    if cols.len() >= 4 {
                        steps_csv.push_str(&format!(
                            "{},{},{},{},{}\n",
                            r.label, cols[0], cols[1], cols[2], cols[3]
                        ));
                        have_steps = true;
                    }
                }
            }
        }
    }
    if have_steps {
        ctx.write("steps.csv", steps_csv.as_bytes())?;
        outputs.push("steps.csv".into());
    }

    if !memscores.is_empty() {
        let mut pairs = String::from("method,id,effective_weight,mem_score\n");
        for m in &memscores {
            for s in &m.samples {
                pairs.push_str(&format!(
                    "{},{},{},{}\n",
                    m.label, s.id, s.effective, s.mem_score
                ));
            }
        }
        ctx.write("fig2_pairs.csv", pairs.as_bytes())?;
        outputs.push("fig2_pairs.csv".into());
    }

    let mut manifest_inputs = BTreeMap::new();
    for (i, path) in inputs.iter().enumerate() {
        manifest_inputs.insert(format!("report{i}"), path.display().to_string());
    }
    ctx.write_manifest("compare", manifest_inputs, outputs)?;
    println!("compared {} inputs -> {}", inputs.len(), ctx.out.join("table.md").display());
    Ok(())
}
