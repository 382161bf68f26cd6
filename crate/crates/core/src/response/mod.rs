//! Response generation: gap scoring over the formulation, question ideation,
//! drafting, and the critic/refine pass.

pub mod critic;
pub mod draft;
pub mod gap;
pub mod ideation;

pub use critic::{
    apply_ops, critique, refine, select_question, CritiqueInput, RefineGuard, Refined,
};
pub use draft::{check_draft, generate_draft, DraftInput, MAX_SENTENCES};
pub use gap::{gap_features, gap_score, rank_gaps, GapEntry, GapFeatures, GapRanking, GapWeights};
pub use ideation::{default_readiness_cues, ideate_questions, IdeationConfig, IdeationInput};

use crate::domain::SlotId;
use crate::gateway::GatewayError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResponseError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("draft still has {sentences} sentences after regeneration")]
    LengthViolation { sentences: usize },
    #[error("draft question is not taken from the candidate pool")]
    QuestionNotFromPool,
    #[error("no candidate question for slot {slot:?} and no inline text")]
    NoCandidateForSlot { slot: Option<SlotId> },
    #[error(transparent)]
    Gateway(GatewayError),
}
