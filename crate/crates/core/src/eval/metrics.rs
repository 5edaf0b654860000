//! Model-level evaluation metrics: truth ratio, forget quality, model
//! utility, and the MUSE quartet (VerbMem, KnowMem, PrivLeak, UtilPres).

use super::ks::ks_two_sample;
use super::rouge::{rouge_l, word_tokens, RougeMode};
use super::EvalError;
use crate::corpus::QARecord;
use crate::model::{self, ModelParams};
use crate::par;

/// `(1/N) sum_i p(paraphrase|x)^{1/len} / p(perturbed_i|x)^{1/len}` — how
/// likely a correct-but-rephrased answer is relative to wrong ones.
pub fn truth_ratio(params: &ModelParams, record: &QARecord) -> Result<f64, EvalError> {
    if record.paraphrase.is_empty() {
        return Err(EvalError::MissingParaphrase(record.id.clone()));
    }
    if record.perturbed.is_empty() {
        return Err(EvalError::MissingPerturbations(record.id.clone()));
    }
    let p_para = model::answer_prob_lengthnorm(params, &record.question, &record.paraphrase)?;
    let mut sum = 0.0;
    for wrong in &record.perturbed {
        let p_wrong = model::answer_prob_lengthnorm(params, &record.question, wrong)?;
        sum += p_para / p_wrong;
    }
    Ok(sum / record.perturbed.len() as f64)
}

/// Truth ratios for a record list, in order.
pub fn truth_ratios(params: &ModelParams, records: &[QARecord]) -> Result<Vec<f64>, EvalError> {
    par::ordered_map(records, |r| truth_ratio(params, r))
        .into_iter()
        .collect()
}

/// Forget quality: KS `(D, p)` between the truth-ratio distributions of the
/// unlearned and retrained models on the forget evaluation set.
pub fn forget_quality(
    params_u: &ModelParams,
    params_r: &ModelParams,
    forget_eval: &[QARecord],
) -> Result<(f64, f64), EvalError> {
    if forget_eval.len() < 2 {
        return Err(EvalError::EmptyInput(
            "forget quality needs at least 2 records".into(),
        ));
    }
    let tr_u = truth_ratios(params_u, forget_eval)?;
    let tr_r = truth_ratios(params_r, forget_eval)?;
    ks_two_sample(&tr_u, &tr_r)
}

/// Mean ROUGE-L between greedy answers and reference answers.
pub fn greedy_answer_rouge(
    params: &ModelParams,
    records: &[QARecord],
    mode: RougeMode,
    max_new: usize,
) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput("rouge record list".into()));
    }
    let scores = par::ordered_map(records, |r| {
        let generated = model::greedy_answer(params, &r.question, max_new)?;
        rouge_l(&word_tokens(&generated), &word_tokens(&r.answer), mode)
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / records.len() as f64)
}

/// The three per-group components of model utility.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupComponents {
    pub group: String,
    pub rouge_l: f64,
    /// Mean length-normalized answer probability (the accuracy stand-in).
    pub prob: f64,
    pub truth_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelUtility {
    /// Harmonic mean of the nine components; 0 when any component is 0.
    pub value: f64,
    pub components: Vec<GroupComponents>,
}

/// Model utility: harmonic aggregate of {ROUGE-L, answer probability, truth
/// ratio} over three retain-side groups.
pub fn model_utility(
    params: &ModelParams,
    groups: &[(&str, &[QARecord])],
    mode: RougeMode,
    max_new: usize,
) -> Result<ModelUtility, EvalError> {
    let mut components = Vec::with_capacity(groups.len());
    for (name, records) in groups {
        if records.is_empty() {
            return Err(EvalError::EmptyInput(format!("utility group `{name}`")));
        }
        let rouge = greedy_answer_rouge(params, records, mode, max_new)?;
        let probs = par::ordered_map(records, |r| {
            model::answer_prob_lengthnorm(params, &r.question, &r.answer)
        });
        let mut prob_sum = 0.0;
        for p in probs {
            prob_sum += p?;
        }
        let prob = prob_sum / records.len() as f64;
        let tr = truth_ratios(params, records)?;
        let tr_mean = tr.iter().sum::<f64>() / tr.len() as f64;
        components.push(GroupComponents {
            group: name.to_string(),
            rouge_l: rouge,
            prob,
            truth_ratio: tr_mean,
        });
    }
    let all: Vec<f64> = components
        .iter()
        .flat_map(|c| [c.rouge_l, c.prob, c.truth_ratio])
        .collect();
    let value = harmonic_mean(&all);
    Ok(ModelUtility { value, components })
}

/// Harmonic mean, defined as 0 whenever any input is 0 (or negative).
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Verbatim memorization: mean ROUGE-L between the greedy continuation of
/// each record's first `prefix_len` tokens and the true continuation.
pub fn verb_mem(
    params: &ModelParams,
    records: &[QARecord],
    prefix_len: usize,
    mode: RougeMode,
) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput("verb_mem record list".into()));
    }
    let scores = par::ordered_map(records, |r| {
        let tok = model::encode_qa(params.vocab(), &r.question, &r.answer)?;
        if tok.ids.len() <= prefix_len {
            return Err(EvalError::RecordTooShort {
                id: r.id.clone(),
                len: tok.ids.len(),
                prefix: prefix_len,
            });
        }
        let prompt = &tok.ids[..prefix_len];
        let budget = tok.ids.len() - prefix_len + 8;
        let generated = model::greedy_generate(params, prompt, budget)?;
        let continuation = params.vocab().decode(&generated[prefix_len..]);
        let truth = params.vocab().decode(&tok.ids[prefix_len..]);
        rouge_l(&word_tokens(&continuation), &word_tokens(&truth), mode)
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / records.len() as f64)
}

/// Knowledge memorization: mean ROUGE-L of greedy answers against references.
/// Utility preservation is this metric on the retain set.
pub fn know_mem(
    params: &ModelParams,
    records: &[QARecord],
    mode: RougeMode,
    max_new: usize,
) -> Result<f64, EvalError> {
    greedy_answer_rouge(params, records, mode, max_new)
}

/// Min-K% membership score: mean of the lowest `ceil(K% * len)` answer-token
/// log-probabilities. Higher means more member-like.
pub fn min_k_prob(
    params: &ModelParams,
    record: &QARecord,
    k_percent: f64,
) -> Result<f64, EvalError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(EvalError::BadK(k_percent));
    }
    let mut logprobs = model::answer_token_logprobs(params, &record.question, &record.answer)?;
    if logprobs.is_empty() {
        return Err(EvalError::EmptyInput(format!("answer of `{}`", record.id)));
    }
    logprobs.sort_by(|a, b| a.partial_cmp(b).expect("finite log-probs"));
    let take = ((k_percent / 100.0) * logprobs.len() as f64).ceil() as usize;
    let take = take.clamp(1, logprobs.len());
    Ok(logprobs[..take].iter().sum::<f64>() / take as f64)
}

/// AUC-ROC via the rank statistic: `Pr[member > nonmember] + 0.5 Pr[tie]`.
pub fn auc_roc(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<f64, EvalError> {
    if member_scores.is_empty() || nonmember_scores.is_empty() {
        return Err(EvalError::EmptyInput("auc score list".into()));
    }
    let mut all: Vec<(f64, bool)> = member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    // Average ranks across ties, then the Mann-Whitney identity.
    let mut rank_sum_members = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for item in &all[i..j] {
            if item.1 {
                rank_sum_members += avg_rank;
            }
        }
        i = j;
    }
    let n_m = member_scores.len() as f64;
    let n_n = nonmember_scores.len() as f64;
    Ok((rank_sum_members - n_m * (n_m + 1.0) / 2.0) / (n_m * n_n))
}

/// Min-K% scores for a record list.
pub fn min_k_scores(
    params: &ModelParams,
    records: &[QARecord],
    k_percent: f64,
) -> Result<Vec<f64>, EvalError> {
    par::ordered_map(records, |r| min_k_prob(params, r, k_percent))
        .into_iter()
        .collect()
}

/// PrivLeak: `(AUC(retrain) - AUC(unlearned)) / AUC(retrain)` with Min-K%
/// membership scores, members drawn from the forget set and nonmembers from
/// the holdout set.
pub fn priv_leak(
    params_r: &ModelParams,
    params_t: &ModelParams,
    forget: &[QARecord],
    holdout: &[QARecord],
    k_percent: f64,
) -> Result<f64, EvalError> {
    let auc_r = auc_roc(
        &min_k_scores(params_r, forget, k_percent)?,
        &min_k_scores(params_r, holdout, k_percent)?,
    )?;
    if auc_r == 0.0 {
        return Err(EvalError::ZeroDenominator("AUC of the retrain model".into()));
    }
    let auc_t = auc_roc(
        &min_k_scores(params_t, forget, k_percent)?,
        &min_k_scores(params_t, holdout, k_percent)?,
    )?;
    Ok((auc_r - auc_t) / auc_r)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &orig in &idx[i..j] {
            ranks[orig] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either side
/// has no rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(EvalError::EmptyInput("spearman inputs".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(auc_roc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
        // members {0.9, 0.4}, nonmembers {0.5, 0.1}: 3 of 4 pairs won.
        let auc = auc_roc(&[0.9, 0.4], &[0.5, 0.1]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_handles_ties_as_half() {
        let auc = auc_roc(&[1.0], &[1.0]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(&[0.5; 9]), 0.5);
        assert_eq!(harmonic_mean(&[0.5, 0.0, 0.7]), 0.0);
        // Harmonic <= arithmetic.
        let vals = [0.4, 0.5, 0.6, 0.7, 0.2, 0.9, 0.35, 0.55, 0.65];
        let h = harmonic_mean(&vals);
        let a = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(h <= a);
        let expect = 9.0 / vals.iter().map(|v| 1.0 / v).sum::<f64>();
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = ys.iter().rev().cloned().collect();
        assert!((spearman(&xs, &rev).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&xs, &[5.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn min_k_selection_rule() {
        // Selection + mean on a fixed list: lowest 40% of 5 entries = 2.
        let logprobs = [-1.0, -2.0, -3.0, -4.0, -5.0];
        let mut sorted = logprobs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let take = ((40.0 / 100.0) * 5.0_f64).ceil() as usize;
        let mean = sorted[..take].iter().sum::<f64>() / take as f64;
        assert_eq!(take, 2);
        assert!((mean + 4.5).abs() < 1e-12);
    }

    #[test]
    fn priv_leak_arithmetic() {
        // AUC_r = 0.8, AUC_t = 0.6 -> 0.25; checked on the raw formula.
        let value = (0.8 - 0.6) / 0.8;
        assert!((value - 0.25f64).abs() < 1e-12);
    }
}
