//! Automatic evaluation metrics: ROUGE-N, ROUGE-L, cumulative BLEU and the
//! question rate of a transcript.
//!
//! The n-gram metrics operate on token lists only, so the choice of tokenizer
//! is independent of the scoring code. Sequences shorter than the n-gram order
//! have no n-grams of that order and score 0 for it.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::domain::Speaker;
use crate::session::TurnEntry;
use crate::text;

wire_enum! {
    /// How raw text is split into tokens before scoring.
    #[derive(Default)]
    pub enum Tokenizer {
        #[default]
        Whitespace => "ws",
        Char => "char",
    }
}

impl Tokenizer {
    /// `Whitespace` splits on Unicode whitespace; `Char` yields every
    /// non-whitespace character, which suits Korean without a morphological
    /// analyser.
    pub fn tokenize(self, s: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => s.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Char => s
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

wire_enum! {
    /// BLEU smoothing for zero n-gram matches.
    #[derive(Default)]
    pub enum Smoothing {
        #[default]
        None => "none",
        /// Adds one to matched and total counts for orders n >= 2.
        AddOne => "add_one",
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

fn f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-N F1 with clipped n-gram overlap.
///
/// # Panics
/// If `n == 0`.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |tokens: &[T]| tokens.len().saturating_sub(n - 1);
    f1(overlap, total(candidate), total(reference))
}

/// Length of the longest common subsequence, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 over the longest common subsequence.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    f1(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

/// Cumulative BLEU-1 through BLEU-`max_n` for one candidate against one or
/// more references.
///
/// Modified precision clips each candidate n-gram count by its maximum count
/// in any single reference. The brevity penalty uses the reference length
/// closest to the candidate length (the shorter one on ties). Without
/// smoothing, a zero precision at any order makes that cumulative score and
/// every higher one 0.
///
/// # Panics
/// If `max_n == 0`.
pub fn bleu<T: Eq + Hash, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    max_n: usize,
    smoothing: Smoothing,
) -> Vec<f64> {
    assert!(max_n >= 1, "bleu requires max_n >= 1");
    if candidate.is_empty() || references.is_empty() {
        return vec![0.0; max_n];
    }
    let precisions: Vec<f64> = (1..=max_n)
        .map(|n| {
            let cand = ngram_counts(candidate, n);
            let refs: Vec<_> = references
                .iter()
                .map(|r| ngram_counts(r.as_ref(), n))
                .collect();
            let matched: usize = cand
                .iter()
                .map(|(g, &k)| {
                    let max_ref = refs
                        .iter()
                        .filter_map(|r| r.get(g))
                        .copied()
                        .max()
                        .unwrap_or(0);
                    k.min(max_ref)
                })
                .sum();
            let total = candidate.len().saturating_sub(n - 1);
            match smoothing {
                Smoothing::AddOne if n >= 2 => (matched + 1) as f64 / (total + 1) as f64,
                _ if total == 0 => 0.0,
                _ => matched as f64 / total as f64,
            }
        })
        .collect();

    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references is non-empty");
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };

    let mut log_sum = 0.0;
    let mut dead = false;
    precisions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p == 0.0 {
                dead = true;
            }
            if dead {
                return 0.0;
            }
            log_sum += p.ln();
            bp * (log_sum / (i + 1) as f64).exp()
        })
        .collect()
}

/// ROUGE and BLEU for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

impl PairScores {
    pub fn values(&self) -> [f64; 7] {
        [
            self.r1, self.r2, self.rl, self.b1, self.b2, self.b3, self.b4,
        ]
    }

    /// Element-wise mean; all zeros for an empty slice.
    pub fn mean(scores: &[PairScores]) -> PairScores {
        if scores.is_empty() {
            return PairScores::default();
        }
        let mut acc = [0.0; 7];
        for s in scores {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        let n = scores.len() as f64;
        let [r1, r2, rl, b1, b2, b3, b4] = acc.map(|a| a / n);
        PairScores {
            r1,
            r2,
            rl,
            b1,
            b2,
            b3,
            b4,
        }
    }
}

/// Tokenizes both strings and computes every metric.
pub fn score_pair(
    candidate: &str,
    reference: &str,
    tokenizer: Tokenizer,
    smoothing: Smoothing,
) -> PairScores {
    let c = tokenizer.tokenize(candidate);
    let r = tokenizer.tokenize(reference);
    let b = bleu(&c, &[&r[..]], 4, smoothing);
    PairScores {
        r1: rouge_n(&c, &r, 1),
        r2: rouge_n(&c, &r, 2),
        rl: rouge_l(&c, &r),
        b1: b[0],
        b2: b[1],
        b3: b[2],
        b4: b[3],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("transcript has no agent turns")]
pub struct EmptyTranscript;

/// Fraction of agent turns containing at least one question sentence.
pub fn question_rate<S: AsRef<str>>(agent_turns: &[S]) -> Result<f64, EmptyTranscript> {
    if agent_turns.is_empty() {
        return Err(EmptyTranscript);
    }
    let asking = agent_turns
        .iter()
        .filter(|t| !text::detect_question_sentences(t.as_ref()).is_empty())
        .count();
    Ok(asking as f64 / agent_turns.len() as f64)
}

/// [`question_rate`] over the agent entries of a stored transcript.
pub fn transcript_question_rate(entries: &[TurnEntry]) -> Result<f64, EmptyTranscript> {
    let agent: Vec<&str> = entries
        .iter()
        .filter(|e| e.speaker == Speaker::Agent)
        .map(|e| e.text.as_str())
        .collect();
    question_rate(&agent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_unigram_hand_count() {
        let v = rouge_n(&toks("a b c"), &toks("a b d"), 1);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_transposition() {
        assert_eq!(lcs_len(&toks("a c b"), &toks("a b c")), 2);
        assert!((rouge_l(&toks("a c b"), &toks("a b c")) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sides_score_zero() {
        let e: Vec<&str> = vec![];
        assert_eq!(rouge_n(&e, &toks("a"), 1), 0.0);
        assert_eq!(rouge_n(&toks("a"), &e, 1), 0.0);
        assert_eq!(rouge_l(&e, &toks("a")), 0.0);
        assert_eq!(bleu(&e, &[toks("a")], 4, Smoothing::None), vec![0.0; 4]);
    }

    #[test]
    fn disjoint_vocab_is_zero() {
        assert_eq!(rouge_n(&toks("a b"), &toks("c d"), 1), 0.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
    }

    #[test]
    fn brevity_penalty_on_short_candidate() {
        let b = bleu(&toks("a b"), &[toks("a b c d")], 1, Smoothing::None);
        assert!((b[0] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn closest_reference_length_prefers_shorter_on_tie() {
        // c = 3; refs of length 2 and 4 are equally close, so r = 2 and BP = 1.
        let b = bleu(
            &toks("a b c"),
            &[toks("a b"), toks("a b c d")],
            1,
            Smoothing::None,
        );
        assert!((b[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        let b = bleu(
            &toks("the the the the"),
            &[toks("the cat")],
            1,
            Smoothing::None,
        );
        // p1 = 1/4, c = 4 > r = 2 so no penalty.
        assert!((b[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_precision_kills_higher_orders_without_smoothing() {
        let b = bleu(&toks("a x b y"), &[toks("a b c d")], 4, Smoothing::None);
        assert!(b[0] > 0.0);
        assert_eq!(&b[1..], &[0.0, 0.0, 0.0]);
        let s = bleu(&toks("a x b y"), &[toks("a b c d")], 4, Smoothing::AddOne);
        assert!(s.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn tokenizers() {
        assert_eq!(
            Tokenizer::Whitespace.tokenize(" a  b\tc "),
            vec!["a", "b", "c"]
        );
        assert_eq!(Tokenizer::Char.tokenize("고민 돼"), vec!["고", "민", "돼"]);
        assert_eq!(serde_json::to_string(&Tokenizer::Char).unwrap(), "\"char\"");
    }

    #[test]
    fn question_rate_arithmetic() {
        let turns = ["How are you?", "I see.", "What then?", "Why? Okay."];
        assert_eq!(question_rate(&turns).unwrap(), 0.75);
        assert_eq!(question_rate(&["Fine.", "Okay."]).unwrap(), 0.0);
        assert_eq!(question_rate::<&str>(&[]), Err(EmptyTranscript));
    }

    #[test]
    fn pair_scores_identity_and_mean() {
        let s = score_pair(
            "one two three four five",
            "one two three four five",
            Tokenizer::Whitespace,
            Smoothing::None,
        );
        assert!(s.values().iter().all(|&v| v == 1.0));
        let m = PairScores::mean(&[s, PairScores::default()]);
        assert!(m.values().iter().all(|&v| v == 0.5));
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(
            c in proptest::collection::vec(0u8..5, 0..12),
            r in proptest::collection::vec(0u8..5, 0..12),
        ) {
            for n in 1..=3 {
                let v = rouge_n(&c, &r, n);
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let l = rouge_l(&c, &r);
            prop_assert!((0.0..=1.0).contains(&l));
            for smoothing in [Smoothing::None, Smoothing::AddOne] {
                for v in bleu(&c, &[&r[..]], 4, smoothing) {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                }
            }
        }

        #[test]
        fn identity_scores_one(x in proptest::collection::vec(0u8..20, 4..15)) {
            for n in 1..=4 {
                prop_assert_eq!(rouge_n(&x, &x, n), 1.0);
            }
            prop_assert_eq!(rouge_l(&x, &x), 1.0);
            for v in bleu(&x, &[&x[..]], 4, Smoothing::None) {
                prop_assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }
}
