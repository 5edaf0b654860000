//! The four gradient-based unlearning objectives.
//!
//! All of them are written as losses to *minimize*; the leading minus sign on
//! the forget term realizes ascent on the forget loss, so a single SGD update
//! `theta -= lr * grad` serves every kind:
//!
//! - GA:      `L = -(1/m) sum w_i f(z_i) + P`
//! - GD:      `L = -(1/m) sum w_i f(z_i) + alpha (1/n) sum f(z_j) + P`
//! - NPO: `L = -(2/beta)(1/m) sum log sigmoid(beta * Delta_i) + P`, with
//!   `Delta_i = w_i (f(z_i) - f0(z_i))` — the weight multiplies inside the
//!   sigmoid argument, unlike GA/GD.
//! - NPO+GD:  NPO forget term plus the GD retain term.
//!
//! `f` is the per-sample answer NLL, `f0` its value under the frozen
//! pre-unlearning model, `w` the per-sample weights, and `P` the proxy
//! penalty. Gradients are assembled from per-sample backward passes with
//! analytically derived outer coefficients; per-sample work fans out in
//! parallel and reduces in batch order, so results are reproducible.

use serde::{Deserialize, Serialize};

use crate::corpus::QARecord;
use crate::graph::GradMap;
use crate::model::{self, LmError, ModelParams};
use crate::par;
use crate::proxy::{self, PenaltyConfig, PenaltyTerms, ProxyError, ProxySample};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("{weights} weights for a batch of {batch}")]
    WeightMismatch { weights: usize, batch: usize },
    #[error("forget batch is empty")]
    EmptyForget,
    #[error("retain batch is empty")]
    EmptyRetain,
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("NPO needs reference losses for the forget batch")]
    MissingRefLosses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Ga,
    Gd,
    Npo,
    #[default]
    #[serde(rename = "npo-gd")]
    NpoGd,
}

impl ObjectiveKind {
    pub fn uses_retain(self) -> bool {
        matches!(self, ObjectiveKind::Gd | ObjectiveKind::NpoGd)
    }

    pub fn uses_reference(self) -> bool {
        matches!(self, ObjectiveKind::Npo | ObjectiveKind::NpoGd)
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ga" => Ok(ObjectiveKind::Ga),
            "gd" => Ok(ObjectiveKind::Gd),
            "npo" => Ok(ObjectiveKind::Npo),
            "npo+gd" | "npo-gd" | "npogd" => Ok(ObjectiveKind::NpoGd),
            other => Err(format!("unknown objective `{other}`")),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObjectiveKind::Ga => "ga",
            ObjectiveKind::Gd => "gd",
            ObjectiveKind::Npo => "npo",
            ObjectiveKind::NpoGd => "npo+gd",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Retain strength `alpha`.
    pub alpha: f64,
    /// NPO inverse temperature `beta`.
    pub beta: f64,
    /// Forget batch size `m`.
    pub forget_batch: usize,
    /// Retain batch size `n`.
    pub retain_batch: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::NpoGd,
            alpha: 1.0,
            beta: 2.5,
            forget_batch: 8,
            retain_batch: 8,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.kind.uses_reference() && self.beta <= 0.0 {
            return Err(ObjectiveError::BadBeta(self.beta));
        }
        Ok(())
    }
}

fn check_weights(batch: &[QARecord], weights: &[f64]) -> Result<(), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyForget);
    }
    if weights.len() != batch.len() {
        return Err(ObjectiveError::WeightMismatch {
            weights: weights.len(),
            batch: batch.len(),
        });
    }
    Ok(())
}

fn batch_nll(params: &ModelParams, batch: &[QARecord]) -> Result<Vec<f64>, ObjectiveError> {
    par::ordered_map(batch, |r| model::sample_nll(params, &r.question, &r.answer))
        .into_iter()
        .map(|r| r.map_err(ObjectiveError::from))
        .collect()
}

/// Per-sample reference losses `f(theta_0, z_i)`, computed once per run.
pub fn reference_losses(
    params_0: &ModelParams,
    batch: &[QARecord],
) -> Result<Vec<f64>, ObjectiveError> {
    batch_nll(params_0, batch)
}

/// `-(1/m) sum w_i f_i + P` from precomputed values.
pub fn ga_from(forget_losses: &[f64], weights: &[f64], penalty: f64) -> f64 {
    let m = forget_losses.len() as f64;
    let mut sum = 0.0;
    for (f, w) in forget_losses.iter().zip(weights) {
        sum += w * f;
    }
    -(sum / m) + penalty
}

/// GD = GA plus `alpha * (1/n) sum f(z_j)`.
pub fn gd_from(
    forget_losses: &[f64],
    weights: &[f64],
    retain_losses: &[f64],
    alpha: f64,
    penalty: f64,
) -> f64 {
    let retain_mean = retain_losses.iter().sum::<f64>() / retain_losses.len() as f64;
    ga_from(forget_losses, weights, penalty) + alpha * retain_mean
}

/// NPO forget term from precomputed current and reference losses.
pub fn npo_from(
    forget_losses: &[f64],
    ref_losses: &[f64],
    weights: &[f64],
    beta: f64,
    penalty: f64,
) -> f64 {
    let m = forget_losses.len() as f64;
    let mut sum = 0.0;
    for i in 0..forget_losses.len() {
        let delta = weights[i] * (forget_losses[i] - ref_losses[i]);
        sum += crate::graph::log_sigmoid(beta * delta);
    }
    -(2.0 / beta) * (sum / m) + penalty
}

pub fn npo_gd_from(
    forget_losses: &[f64],
    ref_losses: &[f64],
    weights: &[f64],
    retain_losses: &[f64],
    alpha: f64,
    beta: f64,
    penalty: f64,
) -> f64 {
    let retain_mean = retain_losses.iter().sum::<f64>() / retain_losses.len() as f64;
    npo_from(forget_losses, ref_losses, weights, beta, penalty) + alpha * retain_mean
}

/// Weighted gradient-ascent loss.
pub fn loss_ga(
    params_t: &ModelParams,
    forget_batch: &[QARecord],
    weights: &[f64],
    penalty: f64,
) -> Result<f64, ObjectiveError> {
    check_weights(forget_batch, weights)?;
    Ok(ga_from(&batch_nll(params_t, forget_batch)?, weights, penalty))
}

/// Gradient-difference loss: weighted ascent plus a descent term on retain.
pub fn loss_gd(
    params_t: &ModelParams,
    forget_batch: &[QARecord],
    weights: &[f64],
    retain_batch: &[QARecord],
    alpha: f64,
    penalty: f64,
) -> Result<f64, ObjectiveError> {
    check_weights(forget_batch, weights)?;
    if retain_batch.is_empty() {
        return Err(ObjectiveError::EmptyRetain);
    }
    Ok(gd_from(
        &batch_nll(params_t, forget_batch)?,
        weights,
        &batch_nll(params_t, retain_batch)?,
        alpha,
        penalty,
    ))
}

/// Negative preference optimization against the frozen reference model.
pub fn loss_npo(
    params_t: &ModelParams,
    params_0: &ModelParams,
    forget_batch: &[QARecord],
    weights: &[f64],
    beta: f64,
    penalty: f64,
) -> Result<f64, ObjectiveError> {
    check_weights(forget_batch, weights)?;
    if beta <= 0.0 {
        return Err(ObjectiveError::BadBeta(beta));
    }
    Ok(npo_from(
        &batch_nll(params_t, forget_batch)?,
        &reference_losses(params_0, forget_batch)?,
        weights,
        beta,
        penalty,
    ))
}

/// NPO forget term combined with the GD retain term.
#[allow(clippy::too_many_arguments)]
pub fn loss_npo_gd(
    params_t: &ModelParams,
    params_0: &ModelParams,
    forget_batch: &[QARecord],
    weights: &[f64],
    retain_batch: &[QARecord],
    alpha: f64,
    beta: f64,
    penalty: f64,
) -> Result<f64, ObjectiveError> {
    check_weights(forget_batch, weights)?;
    if beta <= 0.0 {
        return Err(ObjectiveError::BadBeta(beta));
    }
    if retain_batch.is_empty() {
        return Err(ObjectiveError::EmptyRetain);
    }
    Ok(npo_gd_from(
        &batch_nll(params_t, forget_batch)?,
        &reference_losses(params_0, forget_batch)?,
        weights,
        &batch_nll(params_t, retain_batch)?,
        alpha,
        beta,
        penalty,
    ))
}

/// One evaluated objective: loss, gradient, and the pieces that go into the
/// step log.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub grads: GradMap,
    /// Unweighted mean forget NLL over the batch.
    pub forget_mean_nll: f64,
    /// Mean retain NLL over the retain batch, when one was used.
    pub retain_mean_nll: Option<f64>,
    pub penalty: f64,
    /// True when at least one proxy hinge contributed gradient.
    pub penalty_active: bool,
    /// Per-sample forget losses, in batch order.
    pub forget_losses: Vec<f64>,
    /// Per-sample proxy losses, when the penalty was evaluated.
    pub proxy_losses: Option<Vec<f64>>,
}

/// Accumulate `scale * sample_grads` into `total` in a fixed order.
fn accumulate(total: &mut GradMap, sample: &GradMap, scale: f64) {
    for (name, g) in sample {
        match total.get_mut(name) {
            Some(acc) => acc.axpy(scale, g),
            None => {
                let mut zero = Tensor::zeros(g.dims());
                zero.axpy(scale, g);
                total.insert(name.clone(), zero);
            }
        }
    }
}

/// Evaluate the configured objective and its gradient in one pass.
///
/// `ref_losses` must align with `forget_batch` for the NPO kinds; `proxies`
/// must cover the batch whenever `pcfg.mu > 0`. The retain term is skipped
/// entirely when `alpha == 0`, which makes `GD(alpha=0)` coincide with GA
/// exactly.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_grad(
    params_t: &ModelParams,
    cfg: &ObjectiveConfig,
    forget_batch: &[QARecord],
    weights: &[f64],
    retain_batch: &[QARecord],
    ref_losses: Option<&[f64]>,
    proxies: Option<&[ProxySample]>,
    pcfg: &PenaltyConfig,
) -> Result<ObjectiveEval, ObjectiveError> {
    cfg.validate()?;
    pcfg.validate()?;
    check_weights(forget_batch, weights)?;
    let m = forget_batch.len() as f64;

    // Per-sample forget losses and gradients.
    let forget: Vec<(f64, GradMap)> = par::ordered_map(forget_batch, |r| {
        model::sample_nll_with_grad(params_t, &r.question, &r.answer)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let forget_losses: Vec<f64> = forget.iter().map(|(v, _)| *v).collect();
    let forget_mean_nll = forget_losses.iter().sum::<f64>() / m;

    // Penalty side: proxy loss values first, gradients only where the hinge
    // is active.
    let mut penalty = PenaltyTerms::zero(forget_batch.len());
    let mut proxy_grads: Vec<Option<GradMap>> = vec![None; forget_batch.len()];
    let mut proxy_loss_values: Option<Vec<f64>> = None;
    if pcfg.mu > 0.0 {
        let proxies = proxies.ok_or_else(|| {
            ProxyError::MissingProxy(forget_batch[0].id.clone())
        })?;
        let by_id: std::collections::BTreeMap<&str, &ProxySample> =
            proxies.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut aligned = Vec::with_capacity(forget_batch.len());
        for r in forget_batch {
            match by_id.get(r.id.as_str()) {
                Some(p) => aligned.push(*p),
                None => return Err(ProxyError::MissingProxy(r.id.clone()).into()),
            }
        }
        let proxy_losses: Vec<f64> = par::ordered_map(&aligned, |p| {
            model::sample_nll(params_t, &p.question, &p.proxy_answer)
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        penalty = proxy::penalty_terms(&forget_losses, &proxy_losses, pcfg)?;
        proxy_loss_values = Some(proxy_losses.clone());
        let active: Vec<usize> = (0..aligned.len())
            .filter(|&i| penalty.d_proxy[i] != 0.0)
            .collect();
        let grads: Vec<(usize, GradMap)> = par::ordered_map(&active, |&i| {
            let p = aligned[i];
            model::sample_nll_with_grad(params_t, &p.question, &p.proxy_answer)
                .map(|(_, g)| (i, g))
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        for (i, g) in grads {
            proxy_grads[i] = Some(g);
        }
    }

    // Retain side.
    let use_retain = cfg.kind.uses_retain() && cfg.alpha != 0.0;
    let retain: Vec<(f64, GradMap)> = if use_retain {
        if retain_batch.is_empty() {
            return Err(ObjectiveError::EmptyRetain);
        }
        par::ordered_map(retain_batch, |r| {
            model::sample_nll_with_grad(params_t, &r.question, &r.answer)
        })
        .into_iter()
        .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let retain_losses: Vec<f64> = retain.iter().map(|(v, _)| *v).collect();

    // Outer coefficients dL/df_i per kind.
    let coeffs: Vec<f64> = match cfg.kind {
        ObjectiveKind::Ga | ObjectiveKind::Gd => weights.iter().map(|w| -w / m).collect(),
        ObjectiveKind::Npo | ObjectiveKind::NpoGd => {
            let refs = ref_losses.ok_or(ObjectiveError::MissingRefLosses)?;
            if refs.len() != forget_batch.len() {
                return Err(ObjectiveError::MissingRefLosses);
            }
            (0..forget_batch.len())
                .map(|i| {
                    let delta = weights[i] * (forget_losses[i] - refs[i]);
                    // d/df of -(2/beta)(1/m) log sigmoid(beta w (f - f0)).
                    -(2.0 / m) * weights[i] * crate::graph::sigmoid(-cfg.beta * delta)
                })
                .collect()
        }
    };

    // Loss value.
    let forget_term = match cfg.kind {
        ObjectiveKind::Ga | ObjectiveKind::Gd => ga_from(&forget_losses, weights, 0.0),
        ObjectiveKind::Npo | ObjectiveKind::NpoGd => {
            npo_from(&forget_losses, ref_losses.unwrap(), weights, cfg.beta, 0.0)
        }
    };
    let mut loss = forget_term;
    let retain_mean_nll = if use_retain {
        let mean = retain_losses.iter().sum::<f64>() / retain_losses.len() as f64;
        loss += cfg.alpha * mean;
        Some(mean)
    } else if cfg.kind.uses_retain() {
        Some(0.0)
    } else {
        None
    };
    loss += penalty.value;

    // Gradient: forget samples, then active proxies, then retain, each in
    // batch order.
    let mut grads = GradMap::new();
    for (i, (_, g)) in forget.iter().enumerate() {
        let c = coeffs[i] + penalty.d_forget[i];
        if c != 0.0 {
            accumulate(&mut grads, g, c);
        }
    }
    for (i, maybe) in proxy_grads.iter().enumerate() {
        if let Some(g) = maybe {
            accumulate(&mut grads, g, penalty.d_proxy[i]);
        }
    }
    if use_retain {
        let c = cfg.alpha / retain.len() as f64;
        for (_, g) in &retain {
            accumulate(&mut grads, g, c);
        }
    }

    Ok(ObjectiveEval {
        loss,
        grads,
        forget_mean_nll,
        retain_mean_nll,
        penalty: penalty.value,
        penalty_active: penalty.any_active(),
        forget_losses,
        proxy_losses: proxy_loss_values,
    })
}
