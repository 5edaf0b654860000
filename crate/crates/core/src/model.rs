//! Miniature autoregressive transformer.
//!
//! A character-level, pre-norm transformer small enough to train in seconds
//! but expressive enough to memorize the synthetic QA corpus. Sequences are
//! laid out as `BOS question SEP answer EOS`; the per-sample loss `f(theta,
//! z)` is the mean next-token NLL over the answer span (the EOS terminator
//! included, question tokens masked out), so generation learns where answers
//! end and loss scales stay length-independent.

use serde::{Deserialize, Serialize};

use crate::graph::{GradMap, Graph, GraphError, ParamMap};
use crate::par;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab, VocabError, BOS, EOS, PAD, SEP};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    Overlong { len: usize, max: usize },
    #[error("empty answer")]
    EmptyAnswer,
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("invalid architecture: {0}")]
    BadArch(String),
}

/// How the per-sample loss aggregates token NLLs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over supervised tokens (keeps loss scales length-independent).
    #[default]
    Mean,
    /// Sum over supervised tokens.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub charset: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    #[serde(default)]
    pub loss_reduction: LossReduction,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            charset: crate::vocab::STANDARD_CHARSET.to_string(),
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 96,
            loss_reduction: LossReduction::Mean,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_len == 0 {
            return Err(LmError::BadArch("zero-sized dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LmError::BadArch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab, VocabError> {
        Vocab::from_charset(&self.charset)
    }
}

/// All learnable arrays of one model instance, plus its architecture.
///
/// Instances are immutable values in practice: training and unlearning
/// produce fresh copies, so the original, target, unlearned and retrained
/// models are simply distinct `ModelParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchConfig,
    vocab: Vocab,
    tensors: ParamMap,
}

impl ModelParams {
    /// Fresh Gaussian-initialized parameters, deterministic in the seed.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, LmError> {
        arch.validate()?;
        let vocab = arch.vocab()?;
        let v = vocab.size();
        let (d, ff) = (arch.d_model, 4 * arch.d_model);
        let root = SeededRng::new(seed);
        let mut tensors = ParamMap::new();
        let mut put = |name: &str, dims: &[usize], std: f64| {
            let mut rng = root.derive(name);
            let t = if std == 0.0 {
                Tensor::zeros(dims)
            } else {
                Tensor::randn(dims, std, &mut rng)
            };
            tensors.insert(name.to_string(), t);
        };
        const STD: f64 = 0.08;
        put("tok_embed", &[v, d], STD);
        put("pos_embed", &[arch.max_len, d], STD);
        for l in 0..arch.n_layers {
            put(&format!("l{l}.ln1.g"), &[d], 0.0);
            put(&format!("l{l}.ln1.b"), &[d], 0.0);
            put(&format!("l{l}.attn.wq"), &[d, d], STD);
            put(&format!("l{l}.attn.wk"), &[d, d], STD);
            put(&format!("l{l}.attn.wv"), &[d, d], STD);
            put(&format!("l{l}.attn.wo"), &[d, d], STD);
            put(&format!("l{l}.ln2.g"), &[d], 0.0);
            put(&format!("l{l}.ln2.b"), &[d], 0.0);
            put(&format!("l{l}.ff.w1"), &[d, ff], STD);
            put(&format!("l{l}.ff.b1"), &[ff], 0.0);
            put(&format!("l{l}.ff.w2"), &[ff, d], STD);
            put(&format!("l{l}.ff.b2"), &[d], 0.0);
        }
        put("ln_f.g", &[d], 0.0);
        put("ln_f.b", &[d], 0.0);
        put("head", &[d, v], STD);
        // Layer-norm gains start at one, not zero.
        for (name, t) in tensors.iter_mut() {
            if name.ends_with(".g") {
                t.data_mut().fill(1.0);
            }
        }
        Ok(ModelParams {
            arch,
            vocab,
            tensors,
        })
    }

    /// Rebuild from raw tensors (checkpoint loading); shapes are verified
    /// against the architecture.
    pub fn from_tensors(arch: ArchConfig, tensors: ParamMap) -> Result<Self, LmError> {
        let reference = ModelParams::init(arch.clone(), 0)?;
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                None => return Err(LmError::BadArch(format!("missing tensor `{name}`"))),
                Some(got) if got.dims() != t.dims() => {
                    return Err(LmError::BadArch(format!(
                        "tensor `{name}` has dims {:?}, architecture wants {:?}",
                        got.dims(),
                        t.dims()
                    )))
                }
                _ => {}
            }
        }
        if tensors.len() != reference.tensors.len() {
            return Err(LmError::BadArch("unexpected extra tensors".into()));
        }
        let vocab = arch.vocab()?;
        Ok(ModelParams {
            arch,
            vocab,
            tensors,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tensors(&self) -> &ParamMap {
        &self.tensors
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Apply `theta -= lr * grad` in fixed (name-sorted) order.
    pub fn sgd_step(&mut self, grads: &GradMap, lr: f64) {
        for (name, g) in grads {
            if let Some(t) = self.tensors.get_mut(name) {
                t.axpy(-lr, g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.first_nonfinite().is_none())
    }
}

/// Token layout of one QA sample: `BOS q SEP a EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenized {
    pub ids: Vec<TokenId>,
    /// Index of the first answer token.
    pub answer_start: usize,
    /// Answer length in tokens, EOS excluded.
    pub answer_len: usize,
}

impl Tokenized {
    /// Supervised positions: the answer tokens plus the EOS terminator.
    pub fn supervised_span(&self) -> std::ops::RangeInclusive<usize> {
        self.answer_start..=self.answer_start + self.answer_len
    }
}

/// Encode a QA pair into the model's sequence layout.
pub fn encode_qa(vocab: &Vocab, question: &str, answer: &str) -> Result<Tokenized, LmError> {
    if answer.is_empty() {
        return Err(LmError::EmptyAnswer);
    }
    let q = vocab.encode(question)?;
    let a = vocab.encode(answer)?;
    let mut ids = Vec::with_capacity(q.len() + a.len() + 3);
    ids.push(BOS);
    ids.extend_from_slice(&q);
    ids.push(SEP);
    let answer_start = ids.len();
    ids.extend_from_slice(&a);
    ids.push(EOS);
    Ok(Tokenized {
        ids,
        answer_start,
        answer_len: a.len(),
    })
}

/// Prompt prefix for generation: `BOS q SEP`.
pub fn encode_prompt(vocab: &Vocab, question: &str) -> Result<Vec<TokenId>, LmError> {
    let q = vocab.encode(question)?;
    let mut ids = Vec::with_capacity(q.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(&q);
    ids.push(SEP);
    Ok(ids)
}

fn check_len(arch: &ArchConfig, len: usize) -> Result<(), LmError> {
    if len > arch.max_len {
        return Err(LmError::Overlong {
            len,
            max: arch.max_len,
        });
    }
    if len == 0 {
        return Err(LmError::EmptyTokens);
    }
    Ok(())
}

/// Where [`avg_token_embedding`] reads its per-token vectors from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedRepr {
    /// Final-layer hidden states (contextual); the default.
    #[default]
    Hidden,
    /// Raw embedding-table rows.
    Input,
}

/// Builds the transformer trunk up to the final layer norm; returns the node
/// holding the `[T x d]` hidden states.
fn build_trunk(g: &mut Graph, arch: &ArchConfig, v: usize, ids: &[TokenId]) -> Result<usize, GraphError> {
    let t = ids.len();
    let (d, ff) = (arch.d_model, 4 * arch.d_model);
    let dk = d / arch.n_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let tok = g.param("tok_embed", &[v, d])?;
    let pos = g.param("pos_embed", &[arch.max_len, d])?;
    let tok_rows = g.row_gather(tok, ids)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos_rows = g.row_gather(pos, &positions)?;
    let mut x = g.add(tok_rows, pos_rows)?;

    for l in 0..arch.n_layers {
        let ln1g = g.param(&format!("l{l}.ln1.g"), &[d])?;
        let ln1b = g.param(&format!("l{l}.ln1.b"), &[d])?;
        let h = g.layer_norm(x, ln1g, ln1b)?;
        let wq = g.param(&format!("l{l}.attn.wq"), &[d, d])?;
        let wk = g.param(&format!("l{l}.attn.wk"), &[d, d])?;
        let wv = g.param(&format!("l{l}.attn.wv"), &[d, d])?;
        let wo = g.param(&format!("l{l}.attn.wo"), &[d, d])?;
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let val = g.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(arch.n_heads);
        for hd in 0..arch.n_heads {
            let qh = g.slice_cols(q, hd * dk, dk)?;
            let kh = g.slice_cols(k, hd * dk, dk)?;
            let vh = g.slice_cols(val, hd * dk, dk)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scaled = g.scale(scores, scale);
            let probs = g.causal_softmax_rows(scaled)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        let attn_out = g.matmul(ctx, wo)?;
        x = g.add(x, attn_out)?;

        let ln2g = g.param(&format!("l{l}.ln2.g"), &[d])?;
        let ln2b = g.param(&format!("l{l}.ln2.b"), &[d])?;
        let h2 = g.layer_norm(x, ln2g, ln2b)?;
        let w1 = g.param(&format!("l{l}.ff.w1"), &[d, ff])?;
        let b1 = g.param(&format!("l{l}.ff.b1"), &[ff])?;
        let w2 = g.param(&format!("l{l}.ff.w2"), &[ff, d])?;
        let b2 = g.param(&format!("l{l}.ff.b2"), &[d])?;
        let pre = g.matmul(h2, w1)?;
        let pre_b = g.add_row_vec(pre, b1)?;
        let act = g.gelu(pre_b);
        let post = g.matmul(act, w2)?;
        let post_b = g.add_row_vec(post, b2)?;
        x = g.add(x, post_b)?;
    }

    let lnfg = g.param("ln_f.g", &[d])?;
    let lnfb = g.param("ln_f.b", &[d])?;
    g.layer_norm(x, lnfg, lnfb)
}

/// Graph whose root is the `[T x V]` next-token logit matrix.
pub fn logits_graph(arch: &ArchConfig, vocab_size: usize, ids: &[TokenId]) -> Result<Graph, LmError> {
    check_len(arch, ids.len())?;
    let mut g = Graph::new();
    let hidden = build_trunk(&mut g, arch, vocab_size, ids)?;
    let head = g.param("head", &[arch.d_model, vocab_size])?;
    g.matmul(hidden, head)?;
    Ok(g)
}

/// Graph whose (scalar) root is the per-sample loss `f(theta, z)`.
pub fn nll_graph(arch: &ArchConfig, vocab_size: usize, tok: &Tokenized) -> Result<Graph, LmError> {
    check_len(arch, tok.ids.len())?;
    let t = tok.ids.len();
    let mut g = Graph::new();
    let hidden = build_trunk(&mut g, arch, vocab_size, tok.ids.as_slice())?;
    let head = g.param("head", &[arch.d_model, vocab_size])?;
    let logits = g.matmul(hidden, head)?;
    let logp = g.log_softmax_rows(logits)?;
    // Row t predicts token t+1. Positions after EOS (padding) are masked out.
    let span = tok.supervised_span();
    let mut targets = vec![0usize; t];
    let mut mask = vec![false; t];
    for row in 0..t.saturating_sub(1) {
        let next = row + 1;
        targets[row] = tok.ids[next];
        mask[row] = span.contains(&next) && tok.ids[next] != PAD;
    }
    let picked = g.pick_per_row(logp, &targets)?;
    let mean_lp = g.masked_mean(picked, &mask)?;
    let scaled = match arch.loss_reduction {
        LossReduction::Mean => mean_lp,
        LossReduction::Sum => {
            let n = mask.iter().filter(|&&m| m).count() as f64;
            g.scale(mean_lp, n)
        }
    };
    g.neg(scaled);
    Ok(g)
}

/// Next-token logits for a token sequence: row `t` scores token `t+1`.
pub fn forward_logits(params: &ModelParams, ids: &[TokenId]) -> Result<Tensor, LmError> {
    let g = logits_graph(&params.arch, params.vocab_size(), ids)?;
    Ok(g.evaluate(&params.tensors)?)
}

/// Per-sample loss `f(theta, z)`: mean answer-token NLL (EOS included).
pub fn sample_nll(params: &ModelParams, question: &str, answer: &str) -> Result<f64, LmError> {
    let tok = encode_qa(&params.vocab, question, answer)?;
    let g = nll_graph(&params.arch, params.vocab_size(), &tok)?;
    Ok(g.evaluate(&params.tensors)?.item())
}

/// Loss and its gradient with respect to every parameter.
pub fn sample_nll_with_grad(
    params: &ModelParams,
    question: &str,
    answer: &str,
) -> Result<(f64, GradMap), LmError> {
    let tok = encode_qa(&params.vocab, question, answer)?;
    let g = nll_graph(&params.arch, params.vocab_size(), &tok)?;
    let value = g.evaluate(&params.tensors)?.item();
    let grads = g.gradient(&params.tensors)?;
    Ok((value, grads))
}

/// Geometric-mean token probability of the answer: `exp(-sample_nll)`.
pub fn answer_prob_lengthnorm(
    params: &ModelParams,
    question: &str,
    answer: &str,
) -> Result<f64, LmError> {
    Ok((-sample_nll(params, question, answer)?).exp())
}

/// Log-probability of each answer token (EOS excluded), for membership
/// scoring.
pub fn answer_token_logprobs(
    params: &ModelParams,
    question: &str,
    answer: &str,
) -> Result<Vec<f64>, LmError> {
    let tok = encode_qa(&params.vocab, question, answer)?;
    let logits = forward_logits(params, &tok.ids)?;
    let v = logits.cols();
    let mut out = Vec::with_capacity(tok.answer_len);
    for pos in tok.answer_start..tok.answer_start + tok.answer_len {
        let row = logits.row(pos - 1);
        let target = tok.ids[pos];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
        debug_assert!(target < v);
        out.push(row[target] - lse);
    }
    Ok(out)
}

/// Mean token embedding of a sequence under the chosen representation.
pub fn avg_token_embedding(
    params: &ModelParams,
    ids: &[TokenId],
    repr: EmbedRepr,
) -> Result<Tensor, LmError> {
    check_len(&params.arch, ids.len())?;
    match repr {
        EmbedRepr::Input => {
            let table = &params.tensors["tok_embed"];
            let d = table.cols();
            let mut acc = vec![0.0; d];
            for &id in ids {
                for (a, &x) in acc.iter_mut().zip(table.row(id)) {
                    *a += x;
                }
            }
            let inv = 1.0 / ids.len() as f64;
            for a in &mut acc {
                *a *= inv;
            }
            Ok(Tensor::vector(acc))
        }
        EmbedRepr::Hidden => {
            let mut g = Graph::new();
            let hidden = build_trunk(&mut g, &params.arch, params.vocab_size(), ids)?;
            g.mean_rows(hidden)?;
            Ok(g.evaluate(&params.tensors)?)
        }
    }
}

/// Deterministic greedy decoding; ties go to the lowest token id. Returns the
/// prompt plus up to `max_new` generated tokens, stopping after EOS.
pub fn greedy_generate(
    params: &ModelParams,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>, LmError> {
    check_len(&params.arch, prompt.len())?;
    let mut ids = prompt.to_vec();
    for _ in 0..max_new {
        if ids.len() >= params.arch.max_len {
            break;
        }
        let logits = forward_logits(params, &ids)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (j, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = j;
            }
        }
        ids.push(best);
        if best == EOS {
            break;
        }
    }
    Ok(ids)
}

/// Greedy answer text for a question (`BOS q SEP` prompt, decoded up to EOS).
pub fn greedy_answer(params: &ModelParams, question: &str, max_new: usize) -> Result<String, LmError> {
    let prompt = encode_prompt(&params.vocab, question)?;
    let full = greedy_generate(params, &prompt, max_new)?;
    Ok(params.vocab.decode(&full[prompt.len()..]))
}

/// Optimizer used by [`finetune`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 24,
            lr: 1.5e-3,
            batch_size: 16,
            optimizer: OptimKind::Adam,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub params: ModelParams,
    /// Mean per-sample loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Set when a non-finite loss aborted training; `params` then holds the
    /// last finite state.
    pub diverged_at: Option<(usize, usize)>,
}

struct Adam {
    m: GradMap,
    v: GradMap,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Adam {
            m: GradMap::new(),
            v: GradMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &GradMap, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()));
            let theta = params.tensors.get_mut(name).expect("grad for known tensor");
            let (md, vd, gd, td) = (m.data_mut(), v.data_mut(), g.data(), theta.data_mut());
            for i in 0..gd.len() {
                md[i] = Self::BETA1 * md[i] + (1.0 - Self::BETA1) * gd[i];
                vd[i] = Self::BETA2 * vd[i] + (1.0 - Self::BETA2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                td[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Standard fine-tuning: minimize mean `sample_nll` over the given QA pairs.
/// Bitwise deterministic under `(config.seed, config)`.
pub fn finetune(
    params: &ModelParams,
    pairs: &[(String, String)],
    cfg: &TrainConfig,
) -> Result<FinetuneResult, LmError> {
    let mut current = params.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || pairs.is_empty() {
        return Ok(FinetuneResult {
            params: current,
            epoch_losses,
            diverged_at: None,
        });
    }
    let mut rng = SeededRng::new(cfg.seed).derive("finetune.shuffle");
    let mut adam = Adam::new();
    let batch = cfg.batch_size.max(1);

    // Tokenize once; the layout never changes across epochs.
    let toks: Vec<Tokenized> = pairs
        .iter()
        .map(|(q, a)| encode_qa(&current.vocab, q, a))
        .collect::<Result<_, _>>()?;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let results = par::ordered_map(chunk, |&i| {
                let g = nll_graph(&current.arch, current.vocab_size(), &toks[i])?;
                let value = g.evaluate(&current.tensors)?.item();
                let grads = g.gradient(&current.tensors)?;
                Ok::<_, LmError>((value, grads))
            });
            let mut batch_grads = GradMap::new();
            let mut batch_loss = 0.0;
            let mut ok = true;
            for r in results {
                match r {
                    Ok((value, grads)) => {
                        batch_loss += value;
                        for (name, g) in grads {
                            match batch_grads.get_mut(&name) {
                                Some(acc) => acc.axpy(1.0, &g),
                                None => {
                                    batch_grads.insert(name, g);
                                }
                            }
                        }
                    }
                    Err(LmError::Graph(GraphError::NonFinite { .. })) => ok = false,
                    Err(e) => return Err(e),
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            batch_loss *= inv;
            if !ok || !batch_loss.is_finite() {
                return Ok(FinetuneResult {
                    params: current,
                    epoch_losses,
                    diverged_at: Some((epoch, step)),
                });
            }
            for g in batch_grads.values_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            let mut candidate = current.clone();
            match cfg.optimizer {
                OptimKind::Sgd => candidate.sgd_step(&batch_grads, cfg.lr),
                OptimKind::Adam => adam.step(&mut candidate, &batch_grads, cfg.lr),
            }
            if !candidate.all_finite() {
                return Ok(FinetuneResult {
                    params: current,
                    epoch_losses,
                    diverged_at: Some((epoch, step)),
                });
            }
            current = candidate;
            epoch_sum += batch_loss * chunk.len() as f64;
        }
        epoch_losses.push(epoch_sum / pairs.len() as f64);
    }
    Ok(FinetuneResult {
        params: current,
        epoch_losses,
        diverged_at: None,
    })
}
