//! Entanglement-aware per-sample loss weights.
//!
//! Each forget sample is scored by the cosine between its average token
//! embedding (under the current model) and the aggregated retain embedding
//! (computed once under the pre-unlearning model). Lower similarity means
//! the sample's knowledge is less covered by retained data and earns a
//! larger forgetting weight: `raw = exp(-cos)`, normalized by
//! `softmax(k * raw)` with temperature `k`.
//!
//! The retain embedding supports an incremental update — subtracting forget
//! embeddings from the stored mean — so repeated deletion requests never
//! re-embed the whole retain set.

use serde::{Deserialize, Serialize};

use crate::corpus::QARecord;
use crate::model::{self, EmbedRepr, LmError, ModelParams};
use crate::par;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum EagleError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("retain set is empty")]
    EmptyRetain,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("zero-norm embedding for sample {index} (cosine undefined)")]
    ZeroNorm { index: usize },
    #[error("cannot remove {removing} samples from an aggregate of {count}")]
    RemoveTooMany { removing: usize, count: usize },
    #[error("sample loss must be positive for inverse-loss weights, got {loss} at {index}")]
    NonPositiveLoss { index: usize, loss: f64 },
}

/// Which tokens feed a sample's embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedSpan {
    /// The whole `BOS q SEP a EOS` sequence (default).
    #[default]
    FullSample,
    /// Question tokens only (`BOS q SEP`).
    QuestionOnly,
}

/// Embedding configuration shared by the retain and forget sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EmbedSpec {
    pub repr: EmbedRepr,
    pub span: EmbedSpan,
}

/// Average token embedding of one record under the given model.
pub fn sample_embedding(
    params: &ModelParams,
    record: &QARecord,
    spec: EmbedSpec,
) -> Result<Tensor, EagleError> {
    let vocab: &Vocab = params.vocab();
    let ids = match spec.span {
        EmbedSpan::FullSample => model::encode_qa(vocab, &record.question, &record.answer)?.ids,
        EmbedSpan::QuestionOnly => model::encode_prompt(vocab, &record.question)?,
    };
    Ok(model::avg_token_embedding(params, &ids, spec.repr)?)
}

/// Mean embedding of the retain set and how many samples went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainEmbedding {
    pub vector: Tensor,
    pub count: usize,
}

/// Aggregate the retain set once, under the pre-unlearning model.
pub fn retain_embedding_init(
    params0: &ModelParams,
    retain: &[QARecord],
    spec: EmbedSpec,
) -> Result<RetainEmbedding, EagleError> {
    if retain.is_empty() {
        return Err(EagleError::EmptyRetain);
    }
    let embeds = par::ordered_map(retain, |r| sample_embedding(params0, r, spec));
    let mut acc: Option<Tensor> = None;
    for e in embeds {
        let e = e?;
        match &mut acc {
            Some(a) => a.axpy(1.0, &e),
            None => acc = Some(e),
        }
    }
    let mut vector = acc.unwrap();
    let inv = 1.0 / retain.len() as f64;
    for x in vector.data_mut() {
        *x *= inv;
    }
    Ok(RetainEmbedding {
        vector,
        count: retain.len(),
    })
}

/// Incrementally drop samples from the aggregate:
/// `(count * mean - sum(removed)) / (count - removed)`.
pub fn retain_embedding_update(
    all: &RetainEmbedding,
    removed: &[Tensor],
) -> Result<RetainEmbedding, EagleError> {
    if removed.len() >= all.count {
        return Err(EagleError::RemoveTooMany {
            removing: removed.len(),
            count: all.count,
        });
    }
    if removed.is_empty() {
        return Ok(all.clone());
    }
    let mut scaled = all.vector.clone();
    for x in scaled.data_mut() {
        *x *= all.count as f64;
    }
    for e in removed {
        scaled.axpy(-1.0, e);
    }
    let remaining = all.count - removed.len();
    let inv = 1.0 / remaining as f64;
    for x in scaled.data_mut() {
        *x *= inv;
    }
    Ok(RetainEmbedding {
        vector: scaled,
        count: remaining,
    })
}

/// How softmax weights are scaled afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Plain softmax: weights sum to 1.
    #[default]
    Softmax,
    /// Softmax multiplied by the batch size: weights sum to `m`, so the
    /// `(1/m) * sum w_i f_i` forget term keeps its unweighted magnitude.
    SoftmaxTimesM,
}

/// Per-sample coefficients for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementWeights {
    pub ids: Vec<String>,
    pub cosines: Vec<f64>,
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
    pub k: f64,
    pub scale: ScaleMode,
}

impl EntanglementWeights {
    /// Diagnostics CSV: one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,cosine,raw,weight\n");
        for i in 0..self.ids.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.ids[i], self.cosines[i], self.raw[i], self.weights[i]
            ));
        }
        out
    }
}

fn cosine(a: &Tensor, b: &Tensor) -> Option<f64> {
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}

/// Numerically stable softmax of `k * raw`, optionally rescaled by `m`.
///
/// The denominator is summed in value order, not batch order, so permuting
/// the batch permutes the weights bit-for-bit.
pub fn weights_from_raw(raw: &[f64], k: f64, scale: ScaleMode) -> Vec<f64> {
    let m = raw.len();
    let mx = raw
        .iter()
        .map(|r| k * r)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| (k * r - mx).exp()).collect();
    let mut ordered = exps.clone();
    ordered.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let denom: f64 = ordered.iter().sum();
    let factor = match scale {
        ScaleMode::Softmax => 1.0,
        ScaleMode::SoftmaxTimesM => m as f64,
    };
    exps.iter().map(|e| factor * e / denom).collect()
}

/// Weight computation from raw embedding vectors; the model-independent core
/// of [`eagle_weights`]. Returns `(cosines, raw, weights)`.
#[allow(clippy::type_complexity)]
pub fn weights_from_embeddings(
    embeds: &[Tensor],
    retain: &RetainEmbedding,
    k: f64,
    scale: ScaleMode,
    tolerate_zero: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), EagleError> {
    if embeds.is_empty() {
        return Err(EagleError::EmptyBatch);
    }
    let mut cosines = Vec::with_capacity(embeds.len());
    for (index, e) in embeds.iter().enumerate() {
        match cosine(e, &retain.vector) {
            Some(c) => cosines.push(c),
            None if tolerate_zero => cosines.push(0.0),
            None => return Err(EagleError::ZeroNorm { index }),
        }
    }
    let raw: Vec<f64> = cosines.iter().map(|c| (-c).exp()).collect();
    let weights = weights_from_raw(&raw, k, scale);
    Ok((cosines, raw, weights))
}

/// Entanglement weights for a forget batch under the current model.
///
/// Forget embeddings are recomputed under `params_t` every call; the retain
/// embedding stays frozen at its initialization model.
pub fn eagle_weights(
    retain: &RetainEmbedding,
    batch: &[QARecord],
    params_t: &ModelParams,
    k: f64,
    scale: ScaleMode,
    spec: EmbedSpec,
    tolerate_zero: bool,
) -> Result<EntanglementWeights, EagleError> {
    if batch.is_empty() {
        return Err(EagleError::EmptyBatch);
    }
    let embeds: Vec<Tensor> = par::ordered_map(batch, |r| sample_embedding(params_t, r, spec))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let (cosines, raw, weights) = weights_from_embeddings(&embeds, retain, k, scale, tolerate_zero)?;
    Ok(EntanglementWeights {
        ids: batch.iter().map(|r| r.id.clone()).collect(),
        cosines,
        raw,
        weights,
        k,
        scale,
    })
}

/// Empirical-loss baseline weighting: `w_i = 1 / f(theta, z_i)^lambda`,
/// unnormalized.
pub fn inverse_loss_weights(
    params_t: &ModelParams,
    batch: &[QARecord],
    lambda: f64,
) -> Result<Vec<f64>, EagleError> {
    let losses = par::ordered_map(batch, |r| model::sample_nll(params_t, &r.question, &r.answer));
    let mut weights = Vec::with_capacity(batch.len());
    for (index, l) in losses.into_iter().enumerate() {
        let loss = l?;
        if loss <= 0.0 {
            return Err(EagleError::NonPositiveLoss { index, loss });
        }
        weights.push(1.0 / loss.powf(lambda));
    }
    Ok(weights)
}
