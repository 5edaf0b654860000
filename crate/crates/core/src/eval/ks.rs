//! Two-sample Kolmogorov-Smirnov test.
//!
//! The statistic is the sup-distance between empirical CDFs, computed with
//! integer arithmetic (`|i*n2 - j*n1|` over the merged sweep) so ties and
//! comparisons are exact. The p-value is exact — by enumerating every
//! assignment of pooled observations to the two samples — whenever
//! `C(n1+n2, n1) <= 200_000`, and switches to the asymptotic series
//! otherwise.

use super::EvalError;

/// Assignment-count bound below which the exact permutation p-value is used.
pub const EXACT_LIMIT: u128 = 200_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
        if out > EXACT_LIMIT * 1_000 {
            return u128::MAX / 2; // far past the exact regime; value unused
        }
    }
    out
}

/// Merged-sweep D numerator: `max |count_a * n2 - count_b * n1|` over
/// distinct pooled values, given sorted samples.
fn d_numerator_sorted(a: &[f64], b: &[f64]) -> i64 {
    let (n1, n2) = (a.len() as i64, b.len() as i64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best: i64 = 0;
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        best = best.max((i as i64 * n2 - j as i64 * n1).abs());
    }
    best
}

/// D numerator for one assignment of the sorted pool: `assign[t]` says
/// whether pooled observation `t` belongs to sample a.
fn d_numerator_assignment(pool: &[f64], assign: &[bool], n1: i64, n2: i64) -> i64 {
    let mut best: i64 = 0;
    let (mut ca, mut cb) = (0i64, 0i64);
    let mut t = 0;
    while t < pool.len() {
        let v = pool[t];
        while t < pool.len() && pool[t] == v {
            if assign[t] {
                ca += 1;
            } else {
                cb += 1;
            }
            t += 1;
        }
        best = best.max((ca * n2 - cb * n1).abs());
    }
    best
}

/// Exact conditional p-value: the fraction of assignments whose statistic
/// reaches the observed one.
fn exact_p(pool: &[f64], n1: usize, d_obs: i64) -> f64 {
    let n = pool.len();
    let n2 = n - n1;
    let mut idx: Vec<usize> = (0..n1).collect();
    let mut assign = vec![false; n];
    let mut total: u64 = 0;
    let mut hits: u64 = 0;
    loop {
        for a in assign.iter_mut() {
            *a = false;
        }
        for &i in &idx {
            assign[i] = true;
        }
        total += 1;
        if d_numerator_assignment(pool, &assign, n1 as i64, n2 as i64) >= d_obs {
            hits += 1;
        }
        // Next lexicographic combination.
        let mut k = n1;
        loop {
            if k == 0 {
                return hits as f64 / total as f64;
            }
            k -= 1;
            if idx[k] != k + n - n1 {
                break;
            }
        }
        idx[k] += 1;
        for j in k + 1..n1 {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Asymptotic tail probability `Q(lambda) = 2 sum (-1)^{j-1} exp(-2 j^2
/// lambda^2)`; returns 1 when the series fails to move.
fn asymptotic_q(lambda: f64) -> f64 {
    let mut sum = 0.0;
    let mut sign = 1.0;
    let mut prev_term = 0.0f64;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        if term <= 1e-12 * prev_term.max(1.0) || 2.0 * term < 1e-10 * sum.abs() {
            return (2.0 * sum).clamp(0.0, 1.0);
        }
        sign = -sign;
        prev_term = term;
    }
    1.0
}

/// Two-sample KS test: returns `(D, p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyInput("ks sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite sample values"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite sample values"));
    let (n1, n2) = (sa.len(), sb.len());
    let d_num = d_numerator_sorted(&sa, &sb);
    let d = d_num as f64 / (n1 as f64 * n2 as f64);

    let p = if binomial(n1 + n2, n1) <= EXACT_LIMIT {
        let mut pool = Vec::with_capacity(n1 + n2);
        pool.extend_from_slice(&sa);
        pool.extend_from_slice(&sb);
        pool.sort_by(|x, y| x.partial_cmp(y).expect("finite sample values"));
        exact_p(&pool, n1, d_num)
    } else if d_num == 0 {
        1.0
    } else {
        let ne = (n1 as f64 * n2 as f64) / (n1 + n2) as f64;
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        asymptotic_q(lambda)
    };
    Ok((d, p))
}
