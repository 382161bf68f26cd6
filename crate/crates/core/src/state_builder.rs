//! Per-turn extraction from the user utterance: cognitive-error flags,
//! evidence spans for the six formulation slots, and a theory-of-mind state.
//! Reads no session memory.

use serde::{Deserialize, Serialize};

use crate::domain::*;
use crate::gateway::{Gateway, GatewayError, PromptContext, PromptKind};
use crate::schema::ValidationContext;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StateBuilderError {
    #[error("utterance is empty")]
    EmptyUtterance,
    #[error("recent turns must be non-empty and end with a user turn")]
    BadRecentTurns,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Everything the state builder produced for one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBuild {
    pub flags: Vec<CognitiveErrorFlag>,
    pub spans: PppppiSpans,
    pub tom: TomState,
}

pub fn extract_cognitive_errors(
    gateway: &Gateway,
    utterance: &str,
    turn_index: u32,
) -> Result<Vec<CognitiveErrorFlag>, StateBuilderError> {
    if utterance.trim().is_empty() {
        return Err(StateBuilderError::EmptyUtterance);
    }
    let ctx = PromptContext::new(turn_index).with("utterance", utterance);
    Ok(gateway.complete(
        PromptKind::CognitiveError,
        &ctx,
        &ValidationContext::with_source(utterance),
    )?)
}

pub fn align_pppppi(
    gateway: &Gateway,
    utterance: &str,
    flags: &[CognitiveErrorFlag],
    turn_index: u32,
) -> Result<PppppiSpans, StateBuilderError> {
    if utterance.trim().is_empty() {
        return Err(StateBuilderError::EmptyUtterance);
    }
    let ctx = PromptContext::new(turn_index)
        .with("utterance", utterance)
        .with("flags", flags);
    Ok(gateway.complete(
        PromptKind::PppppiAlign,
        &ctx,
        &ValidationContext::with_source(utterance),
    )?)
}

pub fn infer_tom(
    gateway: &Gateway,
    recent_turns: &[DialogueTurn],
    spans: &PppppiSpans,
    turn_index: u32,
) -> Result<TomState, StateBuilderError> {
    let last = recent_turns
        .last()
        .ok_or(StateBuilderError::BadRecentTurns)?;
    if last.speaker != Speaker::User {
        return Err(StateBuilderError::BadRecentTurns);
    }
    let ctx = PromptContext::new(turn_index)
        .with("recent_turns", recent_turns)
        .with("spans", spans)
        .with("utterance", &last.text);
    Ok(gateway.complete(PromptKind::Tom, &ctx, &ValidationContext::default())?)
}

/// Runs the three stages in order. `utterance` is the text analysed (the
/// pre-session concern on the first turn); `recent_turns` ends with it.
pub fn build_state(
    gateway: &Gateway,
    utterance: &str,
    recent_turns: &[DialogueTurn],
    turn_index: u32,
) -> Result<StateBuild, StateBuilderError> {
    let flags = extract_cognitive_errors(gateway, utterance, turn_index)?;
    let spans = align_pppppi(gateway, utterance, &flags, turn_index)?;
    let tom = infer_tom(gateway, recent_turns, &spans, turn_index)?;
    Ok(StateBuild { flags, spans, tom })
}
