//! ROUGE-L over token sequences.

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RougeMode {
    #[default]
    F1,
    Recall,
}

impl std::str::FromStr for RougeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f1" => Ok(RougeMode::F1),
            "recall" => Ok(RougeMode::Recall),
            other => Err(format!("unknown rouge mode `{other}`")),
        }
    }
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // Two-row dynamic program.
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Longest-common-subsequence ROUGE: precision `LCS/|cand|`, recall
/// `LCS/|ref|`, F1 their harmonic mean (0 when both are 0).
pub fn rouge_l<T: PartialEq>(
    candidate: &[T],
    reference: &[T],
    mode: RougeMode,
) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyInput("rouge reference".into()));
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let recall = lcs / reference.len() as f64;
    match mode {
        RougeMode::Recall => Ok(recall),
        RougeMode::F1 => {
            if candidate.is_empty() {
                return Ok(0.0);
            }
            let precision = lcs / candidate.len() as f64;
            if precision + recall == 0.0 {
                Ok(0.0)
            } else {
                Ok(2.0 * precision * recall / (precision + recall))
            }
        }
    }
}

/// Lowercased whitespace words with punctuation trimmed from the edges; the
/// token unit used by the text metrics.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_score_one() {
        let a = ["the", "cat", "sat"];
        assert_eq!(rouge_l(&a, &a, RougeMode::F1).unwrap(), 1.0);
        assert_eq!(rouge_l(&a, &a, RougeMode::Recall).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_sequences_score_zero() {
        let a = ["x", "y"];
        let b = ["p", "q", "r"];
        assert_eq!(rouge_l(&a, &b, RougeMode::F1).unwrap(), 0.0);
    }

    #[test]
    fn known_prefix_case() {
        // "the cat sat" vs "the cat sat down": P = 1, R = 3/4, F1 = 6/7.
        let cand = ["the", "cat", "sat"];
        let reference = ["the", "cat", "sat", "down"];
        let f1 = rouge_l(&cand, &reference, RougeMode::F1).unwrap();
        assert!((f1 - 6.0 / 7.0).abs() < 1e-12);
        let r = rouge_l(&cand, &reference, RougeMode::Recall).unwrap();
        assert!((r - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_is_zero_and_empty_reference_errors() {
        let cand: [&str; 0] = [];
        assert_eq!(rouge_l(&cand, &["a"], RougeMode::F1).unwrap(), 0.0);
        assert!(rouge_l(&["a"], &cand, RougeMode::F1).is_err());
    }

    #[test]
    fn f1_is_symmetric() {
        let a = ["a", "b", "c", "d"];
        let b = ["b", "d", "e"];
        let ab = rouge_l(&a, &b, RougeMode::F1).unwrap();
        let ba = rouge_l(&b, &a, RougeMode::F1).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn word_tokens_normalize() {
        assert_eq!(
            word_tokens("Mira Voss writes Satire."),
            vec!["mira", "voss", "writes", "satire"]
        );
        assert_eq!(word_tokens("  ?  "), Vec::<String>::new());
    }
}
