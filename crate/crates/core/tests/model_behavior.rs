//! Behavioral contracts of the miniature LM: causality, loss/probability
//! identities, gradient correctness, generation, and training determinism.

use once_cell::sync::Lazy;

use eaglepc_core::model::{
    self, encode_qa, ArchConfig, EmbedRepr, FinetuneResult, LossReduction, ModelParams, OptimKind,
    TrainConfig,
};
use eaglepc_core::tensor::Tensor;
use eaglepc_core::vocab::{Vocab, EOS, PAD, SEP};

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        charset: "abcd ?".into(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_len: 16,
        loss_reduction: LossReduction::Mean,
    }
}

fn zeroed(arch: ArchConfig) -> ModelParams {
    let reference = ModelParams::init(arch.clone(), 0).unwrap();
    let tensors = reference
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims())))
        .collect();
    ModelParams::from_tensors(arch, tensors).unwrap()
}

#[test]
fn logits_shape_and_uniformity_for_zero_params() {
    let params = zeroed(tiny_arch());
    let vocab = params.vocab().clone();
    let ids = {
        let mut v = vec![eaglepc_core::vocab::BOS];
        v.extend(vocab.encode("ab").unwrap());
        v
    };
    let logits = model::forward_logits(&params, &ids).unwrap();
    assert_eq!(logits.dims(), &[3, params.vocab_size()]);
    for r in 0..3 {
        let row = logits.row(r);
        assert!(row.iter().all(|&x| x == row[0]), "uniform logits expected");
    }
}

#[test]
fn causality_under_token_perturbation() {
    let params = ModelParams::init(tiny_arch(), 3).unwrap();
    let vocab = params.vocab().clone();
    let base = vocab.encode("abcda").unwrap();
    let logits = model::forward_logits(&params, &base).unwrap();
    for t in 0..base.len() - 1 {
        let mut perturbed = base.clone();
        // Change a later token and require earlier rows to be untouched.
        perturbed[t + 1] = if perturbed[t + 1] == base[0] { base[1] } else { base[0] };
        let other = model::forward_logits(&params, &perturbed).unwrap();
        for r in 0..=t {
            for (a, b) in logits.row(r).iter().zip(other.row(r)) {
                assert_eq!(a.to_bits(), b.to_bits(), "row {r} changed by token {}", t + 1);
            }
        }
    }
}

#[test]
fn zero_params_give_uniform_nll_and_prob() {
    let params = zeroed(tiny_arch());
    let v = params.vocab_size() as f64;
    let nll = model::sample_nll(&params, "ab?", "c").unwrap();
    assert!((nll - v.ln()).abs() < 1e-12);
    let prob = model::answer_prob_lengthnorm(&params, "ab?", "c").unwrap();
    assert!((prob - 1.0 / v).abs() < 1e-12);
}

#[test]
fn prob_is_exp_of_negative_nll() {
    let params = ModelParams::init(tiny_arch(), 17).unwrap();
    let nll = model::sample_nll(&params, "ab?", "cd").unwrap();
    let prob = model::answer_prob_lengthnorm(&params, "ab?", "cd").unwrap();
    assert!((prob - (-nll).exp()).abs() < 1e-12);
}

#[test]
fn empty_answer_is_rejected() {
    let params = ModelParams::init(tiny_arch(), 17).unwrap();
    assert!(model::sample_nll(&params, "ab?", "").is_err());
}

#[test]
fn nll_is_invariant_to_padding_after_eos() {
    let params = ModelParams::init(tiny_arch(), 9).unwrap();
    let vocab = params.vocab().clone();
    let tok = encode_qa(&vocab, "ab?", "cd").unwrap();
    let plain = model::nll_graph(params.arch(), params.vocab_size(), &tok)
        .unwrap()
        .evaluate(params.tensors())
        .unwrap()
        .item();
    let mut padded = tok.clone();
    padded.ids.extend([PAD, PAD, PAD]);
    let padded_val = model::nll_graph(params.arch(), params.vocab_size(), &padded)
        .unwrap()
        .evaluate(params.tensors())
        .unwrap()
        .item();
    assert_eq!(plain.to_bits(), padded_val.to_bits());
}

#[test]
fn sample_nll_gradient_passes_finite_difference_check() {
    let params = ModelParams::init(tiny_arch(), 21).unwrap();
    let tok = encode_qa(params.vocab(), "ab?", "cd").unwrap();
    let g = model::nll_graph(params.arch(), params.vocab_size(), &tok).unwrap();
    let analytic = g.gradient(params.tensors()).unwrap();
    let fd = g.finite_diff_gradient(params.tensors(), 1e-5).unwrap();
    for (name, a) in &analytic {
        for (i, (x, y)) in a.data().iter().zip(fd[name].data()).enumerate() {
            let tol = 1e-7f64.max(1e-4 * x.abs().max(y.abs()));
            assert!((x - y).abs() <= tol, "{name}[{i}]: {x} vs {y}");
        }
    }
}

#[test]
fn avg_token_embedding_modes() {
    let params = ModelParams::init(tiny_arch(), 5).unwrap();
    let vocab = params.vocab().clone();
    let a = vocab.encode("a").unwrap();
    let single = model::avg_token_embedding(&params, &a, EmbedRepr::Input).unwrap();
    let row: Vec<f64> = params.tensors()["tok_embed"].row(a[0]).to_vec();
    assert_eq!(single.data(), row.as_slice());

    let ab = vocab.encode("ab").unwrap();
    let two = model::avg_token_embedding(&params, &ab, EmbedRepr::Input).unwrap();
    let e1 = params.tensors()["tok_embed"].row(ab[0]);
    let e2 = params.tensors()["tok_embed"].row(ab[1]);
    for j in 0..two.numel() {
        assert!((two.data()[j] - 0.5 * (e1[j] + e2[j])).abs() < 1e-15);
    }

    // Input mode ignores order; hidden mode sees positions.
    let ba = vocab.encode("ba").unwrap();
    let two_rev = model::avg_token_embedding(&params, &ba, EmbedRepr::Input).unwrap();
    assert_eq!(two.data(), two_rev.data());
    let hid = model::avg_token_embedding(&params, &ab, EmbedRepr::Hidden).unwrap();
    let hid_rev = model::avg_token_embedding(&params, &ba, EmbedRepr::Hidden).unwrap();
    assert!(
        hid.data()
            .iter()
            .zip(hid_rev.data())
            .any(|(x, y)| (x - y).abs() > 1e-9),
        "hidden-state embedding should be position-sensitive"
    );
}

#[test]
fn answer_prob_is_monotone_in_token_probabilities() {
    // Hand-built two-letter world. The base model is all-zero (uniform
    // distribution); the boosted model steers a constant hidden state toward
    // the head columns of every supervised answer token (`b` and EOS), which
    // raises each per-token probability and must raise the aggregate.
    let arch = ArchConfig {
        charset: "ab".into(),
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        max_len: 12,
        loss_reduction: LossReduction::Mean,
    };
    let base = zeroed(arch.clone());
    let vocab = base.vocab().clone();
    let b_id = vocab.encode("b").unwrap()[0];
    let mut boosted_tensors = base.tensors().clone();
    // Final layer norm has gamma = 0, so the hidden state is exactly its
    // beta: make every position's hidden state [1, 0, 0, 0].
    boosted_tensors.get_mut("ln_f.b").unwrap().data_mut()[0] = 1.0;
    {
        let head = boosted_tensors.get_mut("head").unwrap();
        let v = head.cols();
        for j in 0..v {
            head.data_mut()[j] = if j == b_id || j == EOS { 0.75 } else { -0.75 };
        }
    }
    let boosted = ModelParams::from_tensors(arch, boosted_tensors).unwrap();
    // Premise: every supervised token's probability rose.
    let base_lp = model::answer_token_logprobs(&base, "a", "bb").unwrap();
    let boost_lp = model::answer_token_logprobs(&boosted, "a", "bb").unwrap();
    for (lo, hi) in base_lp.iter().zip(&boost_lp) {
        assert!(hi > lo, "per-token probability did not rise: {hi} <= {lo}");
    }
    // Conclusion: the length-normalized answer probability rose too.
    let p_base = model::answer_prob_lengthnorm(&base, "a", "bb").unwrap();
    let p_boost = model::answer_prob_lengthnorm(&boosted, "a", "bb").unwrap();
    assert!(p_boost > p_base, "{p_boost} <= {p_base}");
}

#[test]
fn greedy_generate_contracts() {
    let params = ModelParams::init(tiny_arch(), 8).unwrap();
    let vocab = params.vocab().clone();
    let mut prompt = vec![eaglepc_core::vocab::BOS];
    prompt.extend(vocab.encode("ab?").unwrap());
    prompt.push(SEP);
    let unchanged = model::greedy_generate(&params, &prompt, 0).unwrap();
    assert_eq!(unchanged, prompt);
    let once = model::greedy_generate(&params, &prompt, 6).unwrap();
    let twice = model::greedy_generate(&params, &prompt, 6).unwrap();
    assert_eq!(once, twice);
    assert!(once.len() <= prompt.len() + 6);
}

// Shared trained-to-convergence fixture on a five-record corpus.
struct TrainedFixture {
    params: ModelParams,
    pairs: Vec<(String, String)>,
    result: FinetuneResult,
}

static TRAINED: Lazy<TrainedFixture> = Lazy::new(|| {
    let arch = ArchConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        max_len: 80,
        ..ArchConfig::default()
    };
    let init = ModelParams::init(arch, 42).unwrap();
    let pairs: Vec<(String, String)> = vec![
        ("What genre does Mira Voss write?", "Mira Voss writes Satire."),
        ("Where was Kai Sato born?", "Kai Sato was born in Oslo."),
        ("When did Lena Cruz debut?", "Lena Cruz debuted in 1984."),
        ("Which award did Omar Bell win?", "Omar Bell won the Ivory Pen."),
        ("Where did Rhea Lund study?", "Rhea Lund studied at Bram School."),
    ]
    .into_iter()
    .map(|(q, a)| (q.to_string(), a.to_string()))
    .collect();
    let cfg = TrainConfig {
        epochs: 160,
        lr: 2e-3,
        batch_size: 5,
        optimizer: OptimKind::Adam,
        seed: 42,
    };
    let result = finetune_checked(&init, &pairs, &cfg);
    TrainedFixture {
        params: result.params.clone(),
        pairs,
        result,
    }
});

fn finetune_checked(
    init: &ModelParams,
    pairs: &[(String, String)],
    cfg: &TrainConfig,
) -> FinetuneResult {
    let out = model::finetune(init, pairs, cfg).unwrap();
    assert!(out.diverged_at.is_none(), "training diverged: {:?}", out.diverged_at);
    out
}

#[test]
fn memorized_records_have_tiny_nll() {
    let fx = &*TRAINED;
    let v = fx.params.vocab_size() as f64;
    for (q, a) in &fx.pairs {
        let nll = model::sample_nll(&fx.params, q, a).unwrap();
        assert!(nll < 0.1 * v.ln(), "nll {nll} for {q}");
    }
}

#[test]
fn memorizing_model_reproduces_answers_greedily() {
    let fx = &*TRAINED;
    for (q, a) in &fx.pairs {
        let got = model::greedy_answer(&fx.params, q, 48).unwrap();
        assert_eq!(&got, a, "generation drifted for {q}");
    }
}

#[test]
fn generation_stops_at_eos_for_memorized_answers() {
    let fx = &*TRAINED;
    let vocab: &Vocab = fx.params.vocab();
    let prompt = model::encode_prompt(vocab, &fx.pairs[0].0).unwrap();
    let full = model::greedy_generate(&fx.params, &prompt, 60).unwrap();
    assert_eq!(*full.last().unwrap(), EOS);
}

#[test]
fn finetune_epochs_zero_is_identity() {
    let init = ModelParams::init(tiny_arch(), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = model::finetune(&init, &[("ab?".into(), "c".into())], &cfg).unwrap();
    assert_eq!(out.params, init);
    assert!(out.epoch_losses.is_empty());
}

#[test]
fn full_batch_sgd_loss_is_non_increasing() {
    let fx = &*TRAINED;
    let init = ModelParams::init(fx.params.arch().clone(), 7).unwrap();
    let cfg = TrainConfig {
        epochs: 25,
        lr: 0.05,
        batch_size: fx.pairs.len(),
        optimizer: OptimKind::Sgd,
        seed: 1,
    };
    let out = finetune_checked(&init, &fx.pairs, &cfg);
    for w in out.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "epoch loss rose: {w:?}");
    }
}

#[test]
fn finetune_is_bitwise_deterministic() {
    let fx = &*TRAINED;
    let init = ModelParams::init(fx.params.arch().clone(), 11).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch_size: 2,
        optimizer: OptimKind::Adam,
        seed: 5,
    };
    let a = finetune_checked(&init, &fx.pairs, &cfg);
    let b = finetune_checked(&init, &fx.pairs, &cfg);
    for (name, ta) in a.params.tensors() {
        let tb = &b.params.tensors()[name];
        for (x, y) in ta.data().iter().zip(tb.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{name} diverged between runs");
        }
    }
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn epoch_losses_match_training_progress() {
    let fx = &*TRAINED;
    let first = *fx.result.epoch_losses.first().unwrap();
    let last = *fx.result.epoch_losses.last().unwrap();
    assert!(last < 0.25 * first, "training barely moved: {first} -> {last}");
}
