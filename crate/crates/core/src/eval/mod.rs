//! Evaluation suite: TOFU-style forget quality and model utility, MUSE-style
//! memorization and privacy metrics, and the statistical machinery under
//! them (ROUGE-L, two-sample KS, AUC-ROC, Spearman).

pub mod ks;
pub mod metrics;
pub mod rouge;

pub use ks::ks_two_sample;
pub use metrics::{
    auc_roc, forget_quality, harmonic_mean, know_mem, min_k_prob, model_utility, priv_leak,
    spearman, truth_ratio, truth_ratios, verb_mem, GroupComponents, ModelUtility,
};
pub use rouge::{rouge_l, word_tokens, RougeMode};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, QARecord};
use crate::model::{LmError, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("record `{0}` has no paraphrase")]
    MissingParaphrase(String),
    #[error("record `{0}` has no perturbed answers")]
    MissingPerturbations(String),
    #[error("record `{id}` has {len} tokens, shorter than prefix {prefix}")]
    RecordTooShort { id: String, len: usize, prefix: usize },
    #[error("zero denominator: {0}")]
    ZeroDenominator(String),
    #[error("K percent must be in (0, 100], got {0}")]
    BadK(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Min-K% membership parameter.
    pub min_k_percent: f64,
    /// Token prefix length for verbatim memorization.
    pub verbmem_prefix: usize,
    /// Generation budget for greedy answers.
    pub max_new: usize,
    pub rouge: RougeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_k_percent: 20.0,
            verbmem_prefix: 16,
            max_new: 48,
            rouge: RougeMode::F1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetQuality {
    /// KS statistic between the two truth-ratio distributions.
    pub d: f64,
    /// KS p-value; 1 means indistinguishable from the retrain model.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuseMetrics {
    pub verb_mem: f64,
    pub know_mem_forget: f64,
    pub priv_leak: f64,
    pub util_pres: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRatioLists {
    pub forget_unlearned: Vec<f64>,
    pub forget_retrain: Vec<f64>,
}

/// The full metric bundle for one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub label: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub forget_quality: ForgetQuality,
    pub forget_rouge_l: f64,
    pub retain_rouge_l: f64,
    pub model_utility: ModelUtility,
    pub muse: MuseMetrics,
    pub truth_ratios: TruthRatioLists,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Evaluate an unlearned (or any) model against the retrain reference.
///
/// Utility groups: the retain split, the holdout split (unseen entities of
/// the same world) and the auxiliary world-facts records.
pub fn evaluate(
    params_u: &ModelParams,
    params_r: &ModelParams,
    splits: &CorpusSplits,
    world_facts: &[QARecord],
    label: &str,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let tr_u = truth_ratios(params_u, &splits.forget)?;
    let tr_r = truth_ratios(params_r, &splits.forget)?;
    let (d, p) = ks_two_sample(&tr_u, &tr_r)?;

    let forget_rouge_l =
        metrics::greedy_answer_rouge(params_u, &splits.forget, cfg.rouge, cfg.max_new)?;
    let retain_rouge_l =
        metrics::greedy_answer_rouge(params_u, &splits.retain, cfg.rouge, cfg.max_new)?;

    let groups: Vec<(&str, &[QARecord])> = vec![
        ("retain", splits.retain.as_slice()),
        ("holdout", splits.holdout.as_slice()),
        ("world_facts", world_facts),
    ];
    let model_utility = model_utility(params_u, &groups, cfg.rouge, cfg.max_new)?;

    let muse = MuseMetrics {
        verb_mem: verb_mem(params_u, &splits.forget, cfg.verbmem_prefix, cfg.rouge)?,
        know_mem_forget: know_mem(params_u, &splits.forget, cfg.rouge, cfg.max_new)?,
        priv_leak: priv_leak(
            params_r,
            params_u,
            &splits.forget,
            &splits.holdout,
            cfg.min_k_percent,
        )?,
        util_pres: know_mem(params_u, &splits.retain, cfg.rouge, cfg.max_new)?,
    };

    Ok(EvalReport {
        kind: "eval_report".into(),
        label: label.to_string(),
        config_hash: String::new(),
        corpus_hash: String::new(),
        forget_quality: ForgetQuality { d, p },
        forget_rouge_l,
        retain_rouge_l,
        model_utility,
        muse,
        truth_ratios: TruthRatioLists {
            forget_unlearned: tr_u,
            forget_retrain: tr_r,
        },
    })
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// TOFU-style table: forget quality, forget ROUGE-L, model utility, retain
/// ROUGE-L per method, in the given row order.
pub fn tofu_table(reports: &[&EvalReport]) -> String {
    let mut out = String::from("| Method | F.Q. | R-L (forget) | M.U. | R-L (retain) |\n");
    out.push_str("|---|---|---|---|---|\n");
    for r in reports {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.label,
            format_p(r.forget_quality.p),
            fmt4(r.forget_rouge_l),
            fmt4(r.model_utility.value),
            fmt4(r.retain_rouge_l),
        ));
    }
    out
}

/// MUSE-style table: the four criteria, reported x100 as in the benchmark.
pub fn muse_table(reports: &[&EvalReport]) -> String {
    let mut out = String::from(
        "| Method | C1 VerbMem | C2 KnowMem (forget) | C3 PrivLeak | C4 UtilPres |\n",
    );
    out.push_str("|---|---|---|---|---|\n");
    for r in reports {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.label,
            fmt4(100.0 * r.muse.verb_mem),
            fmt4(100.0 * r.muse.know_mem_forget),
            fmt4(100.0 * r.muse.priv_leak),
            fmt4(100.0 * r.muse.util_pres),
        ));
    }
    out
}

fn format_p(p: f64) -> String {
    if p != 0.0 && p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}
