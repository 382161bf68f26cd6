use serde::{Deserialize, Serialize};

use crate::domain::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapWeights {
    pub w_content: f64,
    pub w_evidence: f64,
    pub w_prov: f64,
    pub w_recency: f64,
}

impl Default for GapWeights {
    fn default() -> Self {
        Self {
            w_content: 0.40,
            w_evidence: 0.45,
            w_prov: 0.20,
            w_recency: 0.15,
        }
    }
}

impl GapWeights {
    pub fn is_valid(&self) -> bool {
        [self.w_content, self.w_evidence, self.w_prov, self.w_recency]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

/// Binary indicators of how under-specified a slot is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GapFeatures {
    /// Text is empty or whitespace.
    pub f_content: bool,
    /// No evidence, or the entry is inferred.
    pub f_evidence: bool,
    /// No provenance index within the recent window.
    pub f_prov: bool,
    /// Not changed this turn.
    pub f_recency: bool,
}

impl GapFeatures {
    pub fn from_bits(bits: [bool; 4]) -> Self {
        Self {
            f_content: bits[0],
            f_evidence: bits[1],
            f_prov: bits[2],
            f_recency: bits[3],
        }
    }

    pub fn bits(&self) -> [bool; 4] {
        [self.f_content, self.f_evidence, self.f_prov, self.f_recency]
    }
}

pub fn gap_features(entry: &PppppiEntry, turn_index: u32, window: u32) -> GapFeatures {
    let recent = |p: &u32| u64::from(*p) + u64::from(window) > u64::from(turn_index);
    GapFeatures {
        f_content: entry.text.trim().is_empty(),
        f_evidence: entry.evidence.is_empty() || entry.is_inferred,
        f_prov: !entry.provenance.iter().any(recent),
        f_recency: !entry.changed,
    }
}

/// Weighted sum of the indicators, clipped to `[0, 1]`.
pub fn gap_score(features: GapFeatures, weights: &GapWeights) -> f64 {
    let w = [
        weights.w_content,
        weights.w_evidence,
        weights.w_prov,
        weights.w_recency,
    ];
    let sum: f64 = features
        .bits()
        .iter()
        .zip(w)
        .map(|(on, w)| if *on { w } else { 0.0 })
        .sum();
    sum.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub slot: SlotId,
    pub score: f64,
    pub features: GapFeatures,
}

/// All six slots by descending gap score; equal scores keep canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GapRanking(pub Vec<GapEntry>);

impl GapRanking {
    pub fn entries(&self) -> &[GapEntry] {
        &self.0
    }

    pub fn top(&self, k: usize) -> &[GapEntry] {
        &self.0[..k.min(self.0.len())]
    }

    pub fn score(&self, slot: SlotId) -> Option<f64> {
        self.0.iter().find(|e| e.slot == slot).map(|e| e.score)
    }

    /// `(slot, score)` pairs as handed to prompts.
    pub fn slot_scores(&self) -> Vec<serde_json::Value> {
        self.0
            .iter()
            .map(|e| serde_json::json!({"slot": e.slot, "score": e.score}))
            .collect()
    }
}

pub fn rank_gaps(
    analysis: &PppppiAnalysis,
    turn_index: u32,
    window: u32,
    weights: &GapWeights,
) -> GapRanking {
    let mut entries: Vec<GapEntry> = analysis
        .iter()
        .map(|(slot, entry)| {
            let features = gap_features(entry, turn_index, window);
            GapEntry {
                slot,
                score: gap_score(features, weights),
                features,
            }
        })
        .collect();
    // Stable sort over canonical order gives the tie-break.
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    GapRanking(entries)
}
