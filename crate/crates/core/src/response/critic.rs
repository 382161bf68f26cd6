use serde::{Deserialize, Serialize};

use super::draft::MAX_SENTENCES;
use super::gap::GapRanking;
use super::ResponseError;
use crate::domain::*;
use crate::gateway::{Gateway, PromptContext, PromptKind};
use crate::schema::ValidationContext;
use crate::text;

#[derive(Debug, Clone, Copy)]
pub struct CritiqueInput<'a> {
    pub draft: &'a str,
    pub recent_agent_turns: &'a [String],
    pub narrative: &'a str,
    pub ranking: &'a GapRanking,
    pub candidates: &'a [CandidateQuestion],
    pub language: &'a str,
    pub turn_index: u32,
}

pub fn critique(
    gateway: &Gateway,
    input: CritiqueInput<'_>,
) -> Result<CriticDecision, ResponseError> {
    let ctx = PromptContext::new(input.turn_index)
        .with("draft", input.draft)
        .with("recent_agent_turns", input.recent_agent_turns)
        .with("narrative", input.narrative)
        .with("ranking", input.ranking.slot_scores())
        .with("candidates", input.candidates)
        .with("language", input.language);
    Ok(gateway.complete(PromptKind::Critic, &ctx, &ValidationContext::default())?)
}

/// Picks the question for `replace`/`add`: the highest-confidence pool
/// candidate for the named slot (first in pool order on ties), else the
/// critic's own text.
pub fn select_question(
    op: &QuestionOp,
    candidates: &[CandidateQuestion],
) -> Result<String, ResponseError> {
    let by_slot = op.slot.and_then(|slot| {
        candidates
            .iter()
            .filter(|c| c.slot == slot)
            .fold(None::<&CandidateQuestion>, |best, c| match best {
                Some(b) if b.confidence >= c.confidence => Some(b),
                _ => Some(c),
            })
    });
    match (by_slot, &op.text) {
        (Some(c), _) => Ok(c.question.clone()),
        (None, Some(t)) if !t.trim().is_empty() => Ok(t.trim().to_string()),
        _ => Err(ResponseError::NoCandidateForSlot { slot: op.slot }),
    }
}

/// Applies the critic's question operation to the draft.
///
/// `replace` puts the selected question where the draft's first question was
/// (or at the end) and drops any other questions; `add` appends it.
pub fn apply_ops(
    draft: &str,
    decision: &CriticDecision,
    candidates: &[CandidateQuestion],
) -> Result<String, ResponseError> {
    let op = decision.question_op();
    let sentences = text::split_sentences(draft);
    Ok(match op.action {
        QuestionAction::Keep => draft.to_string(),
        QuestionAction::Remove => text::join_sentences(
            sentences
                .iter()
                .filter(|s| !s.is_question())
                .map(|s| s.text.as_str()),
        ),
        QuestionAction::Add => {
            let q = select_question(op, candidates)?;
            text::join_sentences(
                sentences
                    .iter()
                    .map(|s| s.text.as_str())
                    .chain([q.as_str()]),
            )
        }
        QuestionAction::Replace => {
            let q = select_question(op, candidates)?;
            let at = sentences
                .iter()
                .position(|s| s.is_question())
                .unwrap_or(sentences.len());
            let mut out: Vec<&str> = Vec::with_capacity(sentences.len() + 1);
            for (i, s) in sentences.iter().enumerate() {
                if i == at {
                    out.push(&q);
                }
                if !s.is_question() {
                    out.push(&s.text);
                }
            }
            if at == sentences.len() {
                out.push(&q);
            }
            text::join_sentences(out)
        }
    })
}

/// Why the refine step departed from the critic's literal instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineGuard {
    /// `add` on a draft that already asks something was applied as `replace`.
    AddBecameReplace,
    /// The revision would exceed the sentence limit, so the draft was kept.
    LengthKeptDraft,
    /// Extra questions beyond the first were dropped.
    TrimmedQuestions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    pub text: String,
    pub applied: QuestionAction,
    pub guards: Vec<RefineGuard>,
}

/// [`apply_ops`] wrapped in the turn contract: the final turn has at most
/// [`MAX_SENTENCES`] sentences and at most one question.
pub fn refine(
    draft: &str,
    decision: &CriticDecision,
    candidates: &[CandidateQuestion],
) -> Result<Refined, ResponseError> {
    let mut guards = Vec::new();
    let mut decision = decision.clone();
    if decision.ops.question.action == QuestionAction::Add && text::question_count(draft) > 0 {
        decision.ops.question.action = QuestionAction::Replace;
        guards.push(RefineGuard::AddBecameReplace);
    }
    let mut applied = decision.ops.question.action;
    let mut out = apply_ops(draft, &decision, candidates)?;
    if text::sentence_count(&out) > MAX_SENTENCES {
        out = draft.to_string();
        applied = QuestionAction::Keep;
        guards.push(RefineGuard::LengthKeptDraft);
    }
    if text::question_count(&out) > 1 {
        let mut seen = false;
        let kept: Vec<String> = text::split_sentences(&out)
            .into_iter()
            .filter(|s| {
                if !s.is_question() {
                    return true;
                }
                let first = !seen;
                seen = true;
                first
            })
            .map(|s| s.text)
            .collect();
        out = text::join_sentences(kept.iter().map(String::as_str));
        guards.push(RefineGuard::TrimmedQuestions);
    }
    Ok(Refined {
        text: out,
        applied,
        guards,
    })
}
