//! Data-parallel map with a deterministic contract.
//!
//! Per-sample work (losses, gradients, embeddings, metric terms) is
//! independent, so it can fan out across threads. Results are collected in
//! input order and every reduction happens sequentially afterwards, which
//! makes the parallel and sequential paths bitwise identical. The `parallel`
//! feature (default on) routes [`ordered_map`] through rayon; without it the
//! crate is single-threaded.

/// Map `f` over `items`, preserving input order in the output.
///
/// With the `parallel` feature this fans out over the rayon pool; the output
/// is identical either way.
#[cfg(feature = "parallel")]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Always-sequential variant, kept public so benchmarks can compare the two
/// paths in one build.
pub fn sequential_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
