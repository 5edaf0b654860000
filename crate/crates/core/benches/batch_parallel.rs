//! Parallel vs sequential per-sample loss and gradient throughput.
//!
//! The unlearning loop spends nearly all of its time in per-sample
//! forward/backward passes; this bench compares the rayon-backed
//! `ordered_map` path (used when the default `parallel` feature is on)
//! against the always-available sequential path on the same batch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use eaglepc_core::model::{self, ArchConfig, ModelParams};
use eaglepc_core::par;

fn batch_fixture() -> (ModelParams, Vec<(String, String)>) {
    let arch = ArchConfig {
        d_model: 32,
        n_layers: 1,
        ..ArchConfig::default()
    };
    let params = ModelParams::init(arch, 7).unwrap();
    let pairs: Vec<(String, String)> = (0..16)
        .map(|i| {
            (
                format!("What is the color of object number {i}?"),
                format!("Object number {i} is colored blue."),
            )
        })
        .collect();
    (params, pairs)
}

fn nll_and_grad(params: &ModelParams, q: &str, a: &str) -> f64 {
    let (value, grads) = model::sample_nll_with_grad(params, q, a).unwrap();
    value + grads["head"].data()[0]
}

fn bench_batch(c: &mut Criterion) {
    let (params, pairs) = batch_fixture();
    let mut group = c.benchmark_group("batch_nll_grad");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("ordered_map", pairs.len()), &pairs, |b, pairs| {
        b.iter(|| {
            par::ordered_map(pairs, |(q, a)| nll_and_grad(&params, q, a))
                .iter()
                .sum::<f64>()
        })
    });
    group.bench_with_input(
        BenchmarkId::new("sequential_map", pairs.len()),
        &pairs,
        |b, pairs| {
            b.iter(|| {
                par::sequential_map(pairs, |(q, a)| nll_and_grad(&params, q, a))
                    .iter()
                    .sum::<f64>()
            })
        },
    );
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
