use super::ResponseError;
use crate::domain::*;
use crate::gateway::{Gateway, GatewayError, PromptContext, PromptKind};
use crate::schema::{SchemaViolation, ValidationContext};
use crate::text;

pub const MAX_SENTENCES: usize = 4;

const LENGTH_PATH: &str = "$.sentences";
const POOL_PATH: &str = "$.question";

#[derive(Debug, Clone, Copy)]
pub struct DraftInput<'a> {
    pub plan: &'a StrategyPlan,
    pub utterance: &'a str,
    /// Pre-session concern, shown to the model on every turn.
    pub concern: &'a str,
    pub candidates: &'a [CandidateQuestion],
    pub memory: &'a OverallSummary,
    pub recent_records: &'a [TurnRecord],
    pub language: &'a str,
    pub turn_index: u32,
}

/// Checks a draft against the turn contract: at most [`MAX_SENTENCES`]
/// sentences, and when the plan asks an open question from a non-empty pool,
/// at least one pool question appears verbatim.
pub fn check_draft(
    draft: &str,
    plan: &StrategyPlan,
    candidates: &[CandidateQuestion],
) -> Result<(), SchemaViolation> {
    let n = text::sentence_count(draft);
    if n > MAX_SENTENCES {
        return Err(SchemaViolation::new(
            LENGTH_PATH,
            format!("draft has {n} sentences; at most {MAX_SENTENCES} allowed"),
        ));
    }
    if plan.includes(MiLabel::OpenQuestion)
        && !candidates.is_empty()
        && !candidates
            .iter()
            .any(|c| draft.contains(c.question.as_str()))
    {
        return Err(SchemaViolation::new(
            POOL_PATH,
            "the question must be copied verbatim from the candidate list",
        ));
    }
    Ok(())
}

/// Generates the draft turn. A draft failing [`check_draft`] is regenerated
/// once with the problem stated; a second failure is an error.
pub fn generate_draft(gateway: &Gateway, input: DraftInput<'_>) -> Result<String, ResponseError> {
    let ctx = PromptContext::new(input.turn_index)
        .with("language", input.language)
        .with("turn_index", input.turn_index)
        .with("plan", input.plan)
        .with("concern", input.concern)
        .with("utterance", input.utterance)
        .with("candidates", input.candidates)
        .with("summary", input.memory)
        .with("recent_records", input.recent_records);
    let check = |draft: &String| check_draft(draft, input.plan, input.candidates);
    let checked = gateway.complete_checked(
        PromptKind::Draft,
        &ctx,
        &ValidationContext::default(),
        &check,
        Some(1),
    )?;
    match checked.unresolved {
        None => Ok(checked.value),
        Some(v) if v.path == LENGTH_PATH => Err(ResponseError::LengthViolation {
            sentences: text::sentence_count(&checked.value),
        }),
        Some(_) => Err(ResponseError::QuestionNotFromPool),
    }
}

impl From<GatewayError> for ResponseError {
    fn from(e: GatewayError) -> Self {
        ResponseError::Gateway(e)
    }
}
