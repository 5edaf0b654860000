//! Metric implementations checked against independently coded oracles:
//! recursive-memo LCS for ROUGE-L, O(n^2) pairwise comparison for AUC-ROC,
//! and bitmask enumeration for the exact KS p-value.

use std::collections::HashMap;

use eaglepc_core::eval::{auc_roc, ks_two_sample, rouge_l, RougeMode};
use eaglepc_core::rng::SeededRng;

// Independent LCS: plain recursion with memoization, no DP table sharing
// with the implementation under test.
fn lcs_recursive(a: &[u32], b: &[u32]) -> usize {
    fn go(
        a: &[u32],
        b: &[u32],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn rouge_oracle(cand: &[u32], reference: &[u32], mode: RougeMode) -> f64 {
    let lcs = lcs_recursive(cand, reference) as f64;
    let r = lcs / reference.len() as f64;
    match mode {
        RougeMode::Recall => r,
        RougeMode::F1 => {
            if cand.is_empty() {
                return 0.0;
            }
            let p = lcs / cand.len() as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

#[test]
fn rouge_l_matches_recursive_oracle_on_500_fixtures() {
    let mut rng = SeededRng::new(404);
    for case in 0..500 {
        let alphabet = 2 + rng.index(6) as u32;
        let la = rng.index(12);
        let lb = 1 + rng.index(12);
        let a: Vec<u32> = (0..la).map(|_| rng.index(alphabet as usize) as u32).collect();
        let b: Vec<u32> = (0..lb).map(|_| rng.index(alphabet as usize) as u32).collect();
        for mode in [RougeMode::F1, RougeMode::Recall] {
            let got = rouge_l(&a, &b, mode).unwrap();
            let want = rouge_oracle(&a, &b, mode);
            assert_eq!(got, want, "case {case}: {a:?} vs {b:?}");
        }
    }
}

// O(n^2) pairwise AUC oracle, ties counted half.
fn auc_oracle(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut score = 0.0;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                score += 1.0;
            } else if m == n {
                score += 0.5;
            }
        }
    }
    score / (members.len() * nonmembers.len()) as f64
}

#[test]
fn auc_matches_pairwise_oracle_on_200_fixtures_with_ties() {
    let mut rng = SeededRng::new(77);
    for case in 0..200 {
        let nm = 1 + rng.index(12);
        let nn = 1 + rng.index(12);
        // Coarse grid values force plenty of ties.
        let members: Vec<f64> = (0..nm).map(|_| rng.index(5) as f64 / 4.0).collect();
        let nonmembers: Vec<f64> = (0..nn).map(|_| rng.index(5) as f64 / 4.0).collect();
        let got = auc_roc(&members, &nonmembers).unwrap();
        let want = auc_oracle(&members, &nonmembers);
        assert!(
            (got - want).abs() < 1e-12,
            "case {case}: {got} vs {want} on {members:?} / {nonmembers:?}"
        );
    }
}

// Bitmask-enumeration KS oracle: iterate every subset of the pooled sample
// of size n1, recompute D from empirical CDFs directly, count >= observed.
fn ks_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d_of = |xs: &[f64], ys: &[f64]| -> f64 {
        let mut pool: Vec<f64> = xs.iter().chain(ys).cloned().collect();
        pool.sort_by(|p, q| p.partial_cmp(q).unwrap());
        pool.dedup();
        let mut best = 0.0f64;
        for v in &pool {
            let fa = xs.iter().filter(|&&x| x <= *v).count() as f64 / xs.len() as f64;
            let fb = ys.iter().filter(|&&y| y <= *v).count() as f64 / ys.len() as f64;
            best = best.max((fa - fb).abs());
        }
        best
    };
    let d_obs = d_of(a, b);
    let mut pool: Vec<f64> = a.iter().chain(b).cloned().collect();
    pool.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let n = pool.len();
    let n1 = a.len();
    let mut total = 0u64;
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let mut xs = Vec::with_capacity(n1);
        let mut ys = Vec::with_capacity(n - n1);
        for (t, &v) in pool.iter().enumerate() {
            if mask & (1 << t) != 0 {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        total += 1;
        if d_of(&xs, &ys) >= d_obs - 1e-12 {
            hits += 1;
        }
    }
    (d_obs, hits as f64 / total as f64)
}

#[test]
fn ks_exact_branch_matches_bitmask_enumeration() {
    let mut rng = SeededRng::new(55);
    for n1 in 1..=6usize {
        for n2 in 1..=6usize {
            // A random-valued case and a tie-heavy case per size pair.
            for ties in [false, true] {
                let gen = |rng: &mut SeededRng, n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| {
                            if ties {
                                rng.index(3) as f64
                            } else {
                                rng.uniform()
                            }
                        })
                        .collect()
                };
                let a = gen(&mut rng, n1);
                let b = gen(&mut rng, n2);
                let (d_got, p_got) = ks_two_sample(&a, &b).unwrap();
                let (d_want, p_want) = ks_oracle(&a, &b);
                assert!(
                    (d_got - d_want).abs() < 1e-12,
                    "D mismatch on {a:?} vs {b:?}: {d_got} vs {d_want}"
                );
                assert!(
                    (p_got - p_want).abs() < 1e-12,
                    "p mismatch on {a:?} vs {b:?}: {p_got} vs {p_want}"
                );
            }
        }
    }
}

#[test]
fn ks_p_is_monotone_nonincreasing_in_d_for_fixed_sizes() {
    // Same sizes, increasingly separated samples: D rises, p must not rise.
    let base: Vec<f64> = (0..7).map(|i| i as f64).collect();
    let mut last = (0.0f64, f64::INFINITY);
    for shift in [0.0, 0.5, 1.5, 3.0, 7.0] {
        let moved: Vec<f64> = base.iter().map(|x| x + shift).collect();
        let (d, p) = ks_two_sample(&base, &moved).unwrap();
        assert!(d >= last.0 - 1e-12);
        assert!(p <= last.1 + 1e-12, "p rose from {} to {p} at shift {shift}", last.1);
        last = (d, p);
    }
}
