//! The unlearning loop, the retrain reference, and the memorization oracle.
//!
//! One unlearning run: compute the retain embedding once from the starting
//! model, then per step sample a forget minibatch (epoch-shuffled without
//! replacement), compute entanglement weights under the current model,
//! evaluate the configured objective (with retain batch and proxy penalty as
//! applicable), and take one SGD step. Every stochastic choice draws from
//! streams derived from the run seed, so runs are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, QARecord};
use crate::eagle::{self, EagleError, EmbedSpec, RetainEmbedding, ScaleMode};
use crate::model::{
    self, FinetuneResult, LmError, ModelParams, TrainConfig,
};
use crate::objectives::{self, ObjectiveConfig, ObjectiveError};
use crate::par;
use crate::proxy::{PenaltyConfig, ProxyError, ProxySample, ProxyService};
use crate::rng::SeededRng;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eagle(#[from] EagleError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("penalty weight is positive but no proxy backend was supplied")]
    MissingProxyBackend,
    #[error("record `{0}` not found")]
    RecordNotFound(String),
    #[error("forget set is empty")]
    EmptyForget,
}

/// Whether the softmax in the weight computation runs over the minibatch or
/// the whole forget set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxScope {
    #[default]
    Minibatch,
    FullSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EagleConfig {
    pub enabled: bool,
    /// Entanglement temperature `k`.
    pub k: f64,
    pub scale: ScaleMode,
    pub embed: EmbedSpec,
    pub scope: SoftmaxScope,
    /// Assign cosine 0 to zero-norm embeddings instead of failing.
    pub tolerate_zero: bool,
}

impl Default for EagleConfig {
    fn default() -> Self {
        EagleConfig {
            enabled: true,
            k: 1.0,
            scale: ScaleMode::Softmax,
            embed: EmbedSpec::default(),
            scope: SoftmaxScope::Minibatch,
            tolerate_zero: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub objective: ObjectiveConfig,
    pub eagle: EagleConfig,
    pub penalty: PenaltyConfig,
    /// Number of optimizer steps `T`.
    pub steps: usize,
    /// Learning rate `eta`.
    pub lr: f64,
    pub seed: u64,
    /// Keep a parameter snapshot every this many steps.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            objective: ObjectiveConfig::default(),
            eagle: EagleConfig::default(),
            penalty: PenaltyConfig::default(),
            steps: 6,
            lr: 3e-3,
            seed: 42,
            checkpoint_every: None,
        }
    }
}

impl UnlearnConfig {
    fn validate(&self) -> Result<(), EngineError> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(EngineError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.objective.forget_batch == 0 || self.objective.retain_batch == 0 {
            return Err(EngineError::BadConfig("batch sizes must be at least 1".into()));
        }
        self.objective.validate()?;
        self.penalty.validate()?;
        Ok(())
    }
}

/// One row of the run log (the loss-curve data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Unweighted mean forget NLL over the step's batch.
    pub forget_loss: f64,
    /// Mean retain NLL over the step's retain batch (0 when unused).
    pub retain_loss: f64,
    pub penalty: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    /// Total objective value.
    pub loss: f64,
    /// True when a proxy hinge contributed gradient this step.
    pub penalty_active: bool,
    /// Per-sample weights of the step's batch (not in the CSV).
    pub weights: Vec<f64>,
    /// Per-sample forget losses of the step's batch (not in the CSV).
    pub forget_sample_losses: Vec<f64>,
    /// Per-sample proxy losses, when the penalty was evaluated.
    pub proxy_sample_losses: Option<Vec<f64>>,
}

/// Fixed-column CSV for plotting (step, forget, retain, penalty, weights).
pub fn step_log_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("step,forget_loss,retain_loss,penalty,weight_min,weight_max\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.forget_loss, r.retain_loss, r.penalty, r.weight_min, r.weight_max
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AbortReason {
    NonFiniteLoss { step: usize },
    NonFiniteParams { step: usize },
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub params: ModelParams,
    pub log: Vec<StepRecord>,
    /// `(step, params)` snapshots at the configured cadence.
    pub snapshots: Vec<(usize, ModelParams)>,
    /// Set when the run stopped early; `params` holds the last finite state.
    pub aborted: Option<AbortReason>,
}

/// Epoch-shuffled batching without replacement.
struct BatchScheduler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl BatchScheduler {
    fn new(n: usize, rng: SeededRng) -> Self {
        BatchScheduler {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

fn gather(records: &[QARecord], idx: &[usize]) -> Vec<QARecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Run the full unlearning loop.
///
/// `params_0` is the model fine-tuned on the whole training set; it stays
/// frozen as the NPO reference and as the embedding model for the retain
/// side. A proxy backend is required whenever `cfg.penalty.mu > 0`.
pub fn unlearn(
    params_0: &ModelParams,
    splits: &CorpusSplits,
    cfg: &UnlearnConfig,
    proxy_service: Option<&mut ProxyService>,
) -> Result<UnlearnOutcome, EngineError> {
    cfg.validate()?;
    if splits.forget.is_empty() {
        return Err(EngineError::EmptyForget);
    }

    // Proxies for the whole forget set, generated once (cache makes repeats
    // free).
    let proxies: Option<Vec<ProxySample>> = if cfg.penalty.mu > 0.0 {
        match proxy_service {
            Some(service) => Some(service.generate_proxies(&splits.forget)?),
            None => return Err(EngineError::MissingProxyBackend),
        }
    } else {
        None
    };

    // Retain embedding: once, under the starting model.
    let retain_embedding: Option<RetainEmbedding> = if cfg.eagle.enabled {
        Some(eagle::retain_embedding_init(
            params_0,
            &splits.retain,
            cfg.eagle.embed,
        )?)
    } else {
        None
    };

    // Reference losses for the NPO kinds, frozen at the start.
    let ref_losses: Option<Vec<f64>> = if cfg.objective.kind.uses_reference() {
        Some(objectives::reference_losses(params_0, &splits.forget)?)
    } else {
        None
    };

    let root = SeededRng::new(cfg.seed);
    let mut forget_sched = BatchScheduler::new(splits.forget.len(), root.derive("unlearn.forget"));
    let mut retain_sched = BatchScheduler::new(
        splits.retain.len().max(1),
        root.derive("unlearn.retain"),
    );

    let mut params = params_0.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();

    for step in 0..cfg.steps {
        let batch_idx = forget_sched.next_batch(cfg.objective.forget_batch);
        let batch = gather(&splits.forget, &batch_idx);

        let weights: Vec<f64> = if cfg.eagle.enabled {
            let retain_embedding = retain_embedding.as_ref().unwrap();
            let scope_batch = match cfg.eagle.scope {
                SoftmaxScope::Minibatch => batch.as_slice(),
                SoftmaxScope::FullSet => splits.forget.as_slice(),
            };
            let computed = eagle::eagle_weights(
                retain_embedding,
                scope_batch,
                &params,
                cfg.eagle.k,
                cfg.eagle.scale,
                cfg.eagle.embed,
                cfg.eagle.tolerate_zero,
            );
            let all = match computed {
                Ok(w) => w,
                Err(EagleError::Lm(LmError::Graph(crate::graph::GraphError::NonFinite {
                    ..
                }))) => {
                    return Ok(UnlearnOutcome {
                        params,
                        log,
                        snapshots,
                        aborted: Some(AbortReason::NonFiniteLoss { step }),
                    });
                }
                Err(e) => return Err(e.into()),
            };
            match cfg.eagle.scope {
                SoftmaxScope::Minibatch => all.weights,
                SoftmaxScope::FullSet => batch_idx.iter().map(|&i| all.weights[i]).collect(),
            }
        } else {
            vec![1.0; batch.len()]
        };

        let retain_batch = if cfg.objective.kind.uses_retain() && !splits.retain.is_empty() {
            let idx = retain_sched.next_batch(cfg.objective.retain_batch);
            gather(&splits.retain, &idx)
        } else {
            Vec::new()
        };

        let batch_refs: Option<Vec<f64>> = ref_losses
            .as_ref()
            .map(|all| batch_idx.iter().map(|&i| all[i]).collect());

        let eval = match objectives::evaluate_with_grad(
            &params,
            &cfg.objective,
            &batch,
            &weights,
            &retain_batch,
            batch_refs.as_deref(),
            proxies.as_deref(),
            &cfg.penalty,
        ) {
            Ok(eval) => eval,
            Err(ObjectiveError::Lm(LmError::Graph(crate::graph::GraphError::NonFinite {
                ..
            }))) => {
                return Ok(UnlearnOutcome {
                    params,
                    log,
                    snapshots,
                    aborted: Some(AbortReason::NonFiniteLoss { step }),
                });
            }
            Err(e) => return Err(e.into()),
        };
        if !eval.loss.is_finite() {
            return Ok(UnlearnOutcome {
                params,
                log,
                snapshots,
                aborted: Some(AbortReason::NonFiniteLoss { step }),
            });
        }

        let mut next = params.clone();
        next.sgd_step(&eval.grads, cfg.lr);
        if !next.all_finite() {
            return Ok(UnlearnOutcome {
                params,
                log,
                snapshots,
                aborted: Some(AbortReason::NonFiniteParams { step }),
            });
        }

        log.push(StepRecord {
            step,
            forget_loss: eval.forget_mean_nll,
            retain_loss: eval.retain_mean_nll.unwrap_or(0.0),
            penalty: eval.penalty,
            weight_min: weights.iter().cloned().fold(f64::INFINITY, f64::min),
            weight_max: weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            loss: eval.loss,
            penalty_active: eval.penalty_active,
            weights: weights.clone(),
            forget_sample_losses: eval.forget_losses.clone(),
            proxy_sample_losses: eval.proxy_losses.clone(),
        });
        params = next;

        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && (step + 1) % every == 0 {
                snapshots.push((step + 1, params.clone()));
            }
        }
    }

    Ok(UnlearnOutcome {
        params,
        log,
        snapshots,
        aborted: None,
    })
}

/// Retrain reference: fine-tune the retain set only, from the same base
/// initialization as the original model's pretraining.
pub fn retrain_reference(
    base_init: &ModelParams,
    splits: &CorpusSplits,
    cfg: &TrainConfig,
) -> Result<FinetuneResult, EngineError> {
    let pairs = crate::corpus::qa_pairs(&splits.retain);
    Ok(model::finetune(base_init, &pairs, cfg)?)
}

/// Configuration of the leave-one-out memorization oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemScoreConfig {
    pub arch: crate::model::ArchConfig,
    pub train: TrainConfig,
    pub n_seeds: usize,
    /// Generation budget when checking an exact answer match.
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemScore {
    pub id: String,
    /// `Pr[correct | trained with record] - Pr[correct | trained without]`.
    pub score: f64,
    pub with_accuracy: f64,
    pub without_accuracy: f64,
}

fn greedy_matches(params: &ModelParams, record: &QARecord, max_new: usize) -> bool {
    match model::greedy_answer(params, &record.question, max_new) {
        Ok(answer) => answer == record.answer,
        Err(_) => false,
    }
}

/// Monte-Carlo memorization scores for several records at once.
///
/// Per seed, the with-record model is trained once and shared across all
/// targets; each target additionally trains a model on the corpus minus that
/// record. "Correct" means the greedy answer matches the stored answer
/// exactly.
pub fn memorization_scores(
    train_records: &[QARecord],
    target_ids: &[String],
    cfg: &MemScoreConfig,
) -> Result<Vec<MemScore>, EngineError> {
    let mut targets = Vec::with_capacity(target_ids.len());
    for id in target_ids {
        let idx = train_records
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| EngineError::RecordNotFound(id.clone()))?;
        targets.push(idx);
    }
    let pairs = crate::corpus::qa_pairs(train_records);
    let seed_root = SeededRng::new(cfg.train.seed);

    // One (with, without x targets) bundle per seed, evaluated in parallel.
    type SeedOutcome = (Vec<bool>, Vec<bool>);
    let seeds: Vec<usize> = (0..cfg.n_seeds.max(1)).collect();
    let per_seed: Vec<Result<SeedOutcome, EngineError>> =
        par::ordered_map(&seeds, |&s| {
            let stream = seed_root.derive(&format!("memscore.seed{s}"));
            let init = ModelParams::init(cfg.arch.clone(), stream.derive("init").seed())?;
            let train_cfg = TrainConfig {
                seed: stream.derive("shuffle").seed(),
                ..cfg.train.clone()
            };
            let with_model = model::finetune(&init, &pairs, &train_cfg)?.params;
            let with_correct: Vec<bool> = targets
                .iter()
                .map(|&idx| greedy_matches(&with_model, &train_records[idx], cfg.max_new))
                .collect();
            let without_results = par::ordered_map(&targets, |&idx| {
                let mut reduced = pairs.clone();
                reduced.remove(idx);
                let without_model = model::finetune(&init, &reduced, &train_cfg)?.params;
                Ok::<bool, EngineError>(greedy_matches(
                    &without_model,
                    &train_records[idx],
                    cfg.max_new,
                ))
            });
            let mut without_correct = Vec::with_capacity(targets.len());
            for r in without_results {
                without_correct.push(r?);
            }
            Ok((with_correct, without_correct))
        });

    let mut with_counts = vec![0usize; targets.len()];
    let mut without_counts = vec![0usize; targets.len()];
    let n = seeds.len() as f64;
    for r in per_seed {
        let (with_correct, without_correct) = r?;
        for (j, &c) in with_correct.iter().enumerate() {
            with_counts[j] += c as usize;
        }
        for (j, &c) in without_correct.iter().enumerate() {
            without_counts[j] += c as usize;
        }
    }
    Ok(targets
        .iter()
        .enumerate()
        .map(|(j, &idx)| {
            let with_accuracy = with_counts[j] as f64 / n;
            let without_accuracy = without_counts[j] as f64 / n;
            MemScore {
                id: train_records[idx].id.clone(),
                score: with_accuracy - without_accuracy,
                with_accuracy,
                without_accuracy,
            }
        })
        .collect())
}

/// Single-record variant of [`memorization_scores`].
pub fn memorization_score(
    train_records: &[QARecord],
    record_id: &str,
    cfg: &MemScoreConfig,
) -> Result<MemScore, EngineError> {
    Ok(memorization_scores(train_records, &[record_id.to_string()], cfg)?.remove(0))
}

/// Per-sample weighting profile under the starting model: entanglement
/// weight, loss-gradient norm, and their product. The product column is the
/// sample's effective contribution to the forgetting loss, comparable
/// against memorization scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub id: String,
    pub weight: f64,
    pub cosine: f64,
    pub grad_norm: f64,
    pub effective: f64,
}

pub fn weight_gradnorm_profile(
    params_0: &ModelParams,
    splits: &CorpusSplits,
    eagle_cfg: &EagleConfig,
) -> Result<Vec<WeightProfile>, EngineError> {
    if splits.forget.is_empty() {
        return Err(EngineError::EmptyForget);
    }
    let retain_embedding = eagle::retain_embedding_init(params_0, &splits.retain, eagle_cfg.embed)?;
    let weights = eagle::eagle_weights(
        &retain_embedding,
        &splits.forget,
        params_0,
        eagle_cfg.k,
        eagle_cfg.scale,
        eagle_cfg.embed,
        eagle_cfg.tolerate_zero,
    )?;
    let grad_norms: Vec<f64> = par::ordered_map(&splits.forget, |r| {
        let (_, grads) = model::sample_nll_with_grad(params_0, &r.question, &r.answer)?;
        let sq: f64 = grads.values().map(|t| t.l2_norm().powi(2)).sum();
        Ok::<f64, EngineError>(sq.sqrt())
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    Ok(splits
        .forget
        .iter()
        .enumerate()
        .map(|(i, r)| WeightProfile {
            id: r.id.clone(),
            weight: weights.weights[i],
            cosine: weights.cosines[i],
            grad_norm: grad_norms[i],
            effective: weights.weights[i] * grad_norms[i],
        })
        .collect())
}
