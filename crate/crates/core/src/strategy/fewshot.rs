use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::MiLabel;

const BUILTIN_STORE: &str = include_str!("../../assets/fewshot.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotExample {
    pub client_utterance: String,
    pub counselor_response: String,
    pub label: MiLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FewShotError {
    #[error("few-shot store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot load few-shot store: {0}")]
    Load(String),
}

/// Similarity between a query utterance and a stored client utterance.
pub trait SimilarityScorer: Send + Sync {
    fn score(&self, query: &str, candidate: &str) -> f64;
}

/// Cosine similarity of lowercased token-count vectors. Tokens are maximal
/// runs of alphanumeric characters; Hangul syllable bigrams are added so that
/// inflected Korean words still overlap.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlapCosine;

fn token_counts(text: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let lower = token.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        if !lower.is_ascii() && chars.len() > 2 {
            for pair in chars.windows(2) {
                *counts.entry(pair.iter().collect::<String>()).or_insert(0.0) += 1.0;
            }
        }
        *counts.entry(lower).or_insert(0.0) += 1.0;
    }
    counts
}

impl SimilarityScorer for TokenOverlapCosine {
    fn score(&self, query: &str, candidate: &str) -> f64 {
        let a = token_counts(query);
        let b = token_counts(candidate);
        let dot: f64 = a.iter().filter_map(|(t, x)| b.get(t).map(|y| x * y)).sum();
        let norm = |m: &BTreeMap<String, f64>| m.values().map(|x| x * x).sum::<f64>().sqrt();
        let denom = norm(&a) * norm(&b);
        if denom == 0.0 {
            0.0
        } else {
            dot / denom
        }
    }
}

pub fn builtin_store() -> Vec<FewShotExample> {
    serde_json::from_str(BUILTIN_STORE).expect("shipped few-shot store is valid")
}

pub fn load_store(path: &Path) -> Result<Vec<FewShotExample>, FewShotError> {
    let text = std::fs::read_to_string(path).map_err(|e| FewShotError::Load(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| FewShotError::Load(e.to_string()))
}

/// Top-`k` examples by similarity to `utterance`; ties go to the lower store index.
pub fn retrieve_fewshot(
    utterance: &str,
    store: &[FewShotExample],
    k: usize,
    scorer: &dyn SimilarityScorer,
) -> Result<Vec<FewShotExample>, FewShotError> {
    if store.is_empty() {
        return Err(FewShotError::EmptyStore);
    }
    if k == 0 {
        return Err(FewShotError::ZeroK);
    }
    let mut scored: Vec<(usize, f64)> = store
        .iter()
        .enumerate()
        .map(|(i, ex)| (i, scorer.score(utterance, &ex.client_utterance)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, _)| store[i].clone())
        .collect())
}
