use serde::{Deserialize, Serialize};

use super::gap::GapRanking;
use super::ResponseError;
use crate::domain::*;
use crate::gateway::{Gateway, PromptContext, PromptKind};
use crate::schema::ValidationContext;

/// Phrases signalling that the user is ready to talk about strengths or
/// coping, which lifts the Protective gate regardless of its gap score.
pub fn default_readiness_cues() -> Vec<String> {
    [
        "what can i do",
        "how can i",
        "how do i cope",
        "i want to get better",
        "i want to change",
        "what helped",
        "what helps",
        "어떻게 하면",
        "어떻게 해야",
        "도움이 될",
        "나아지고 싶",
        "극복하고 싶",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdeationConfig {
    /// Number of top-ranked slots to target.
    pub k: usize,
    pub tau_protective: f64,
    /// Matched as lowercase substrings of the latest user utterance.
    pub readiness_cues: Vec<String>,
}

impl Default for IdeationConfig {
    fn default() -> Self {
        Self {
            k: 3,
            tau_protective: 0.8,
            readiness_cues: default_readiness_cues(),
        }
    }
}

impl IdeationConfig {
    pub fn signals_readiness(&self, utterance: &str) -> bool {
        let lower = utterance.to_lowercase();
        self.readiness_cues
            .iter()
            .any(|cue| !cue.is_empty() && lower.contains(&cue.to_lowercase()))
    }

    /// Slots eligible for questions this turn, in ranking order.
    pub fn target_slots(&self, ranking: &GapRanking, latest_utterance: &str) -> Vec<(SlotId, f64)> {
        let ready = self.signals_readiness(latest_utterance);
        ranking
            .top(self.k)
            .iter()
            .filter(|e| e.slot != SlotId::Protective || e.score >= self.tau_protective || ready)
            .map(|e| (e.slot, e.score))
            .collect()
    }
}

/// Everything the ideation prompt sees.
#[derive(Debug, Clone, Copy)]
pub struct IdeationInput<'a> {
    pub ranking: &'a GapRanking,
    pub analysis: &'a PppppiAnalysis,
    pub recent_turns: &'a [DialogueTurn],
    pub keywords: &'a [String],
    pub language: &'a str,
    pub turn_index: u32,
}

/// Asks for candidate questions over the gated top-k slots. Returned
/// candidates aimed at other slots are dropped, at most one is kept per slot,
/// and the pool is ordered by gap score then confidence. No call is made when
/// gating leaves nothing to target.
pub fn ideate_questions(
    gateway: &Gateway,
    input: IdeationInput<'_>,
    config: &IdeationConfig,
) -> Result<Vec<CandidateQuestion>, ResponseError> {
    if config.k == 0 {
        return Err(ResponseError::ZeroK);
    }
    let latest = input
        .recent_turns
        .iter()
        .rev()
        .find(|t| t.speaker == Speaker::User)
        .map(|t| t.text.as_str())
        .unwrap_or("");
    let targets = config.target_slots(input.ranking, latest);
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let target_json: Vec<_> = targets
        .iter()
        .map(|(slot, score)| serde_json::json!({"slot": slot, "score": score}))
        .collect();
    let ctx = PromptContext::new(input.turn_index)
        .with("language", input.language)
        .with("turn_index", input.turn_index)
        .with("target_slots", &target_json)
        .with("analysis", input.analysis)
        .with("recent_turns", input.recent_turns)
        .with("keywords", input.keywords);
    let raw: Vec<CandidateQuestion> = gateway.complete(
        PromptKind::QuestionIdeation,
        &ctx,
        &ValidationContext::default(),
    )?;

    let rank_of = |slot: SlotId| targets.iter().position(|(s, _)| *s == slot);
    let mut pool: Vec<(usize, usize, CandidateQuestion)> = Vec::new();
    for (i, c) in raw.into_iter().enumerate() {
        if let Some(r) = rank_of(c.slot) {
            if !pool.iter().any(|(_, _, p)| p.slot == c.slot) {
                pool.push((r, i, c));
            }
        }
    }
    pool.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.2.confidence.total_cmp(&a.2.confidence))
            .then(a.1.cmp(&b.1))
    });
    Ok(pool.into_iter().map(|(_, _, c)| c).collect())
}
