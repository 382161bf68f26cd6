//! MI behavioral-code planning: two label rounds with category exclusion, then
//! an act plan for the chosen codes.

mod fewshot;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use fewshot::{
    builtin_store, load_store, retrieve_fewshot, FewShotError, FewShotExample, SimilarityScorer,
    TokenOverlapCosine,
};

use crate::domain::*;
use crate::gateway::{Gateway, GatewayError, PromptContext, PromptKind};
use crate::schema::{SchemaViolation, ValidationContext};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrategyError {
    #[error("second-round label {label} is excluded by first-round label {first}")]
    ExclusionViolation { first: MiLabel, label: MiLabel },
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Labels that may not be chosen in round two after `first` in round one.
/// Picking either question subtype excludes both, likewise for reflections.
pub fn exclusion_set(first: MiLabel) -> BTreeSet<MiLabel> {
    if first.is_question() {
        [MiLabel::OpenQuestion, MiLabel::ClosedQuestion].into()
    } else if first.is_reflection() {
        [MiLabel::SimpleReflection, MiLabel::ComplexReflection].into()
    } else {
        [first].into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPair {
    pub primary: LabelPrediction,
    pub secondary: LabelPrediction,
}

pub fn predict_labels(
    gateway: &Gateway,
    utterance: &str,
    recent_turns: &[DialogueTurn],
    examples: &[FewShotExample],
    turn_index: u32,
) -> Result<LabelPair, StrategyError> {
    let ctx = PromptContext::new(turn_index)
        .with("utterance", utterance)
        .with("recent_turns", recent_turns)
        .with("examples", examples);
    let primary: LabelPrediction =
        gateway.complete(PromptKind::LabelRound1, &ctx, &ValidationContext::default())?;

    let excluded = exclusion_set(primary.label);
    let round2_examples: Vec<&FewShotExample> = examples
        .iter()
        .filter(|e| !excluded.contains(&e.label))
        .collect();
    let ctx = PromptContext::new(turn_index)
        .with("utterance", utterance)
        .with("recent_turns", recent_turns)
        .with("examples", &round2_examples)
        .with("first_label", primary.label)
        .with("excluded_labels", &excluded);
    let check = |p: &LabelPrediction| {
        if excluded.contains(&p.label) {
            Err(SchemaViolation::new(
                "label",
                format!("{} is excluded after {}", p.label, primary.label),
            ))
        } else {
            Ok(())
        }
    };
    let checked = gateway.complete_checked(
        PromptKind::LabelRound2,
        &ctx,
        &ValidationContext::default(),
        &check,
        None,
    )?;
    if checked.unresolved.is_some() {
        return Err(StrategyError::ExclusionViolation {
            first: primary.label,
            label: checked.value.label,
        });
    }
    Ok(LabelPair {
        primary,
        secondary: checked.value,
    })
}

pub fn generate_strategy(
    gateway: &Gateway,
    labels: &LabelPair,
    utterance: &str,
    tom: &TomState,
    summary: &OverallSummary,
    turn_index: u32,
) -> Result<StrategyPlan, StrategyError> {
    let ctx = PromptContext::new(turn_index)
        .with("primary", &labels.primary)
        .with("secondary", Some(&labels.secondary))
        .with("utterance", utterance)
        .with("tom", tom)
        .with("summary", summary);
    let wanted = [labels.primary.label, labels.secondary.label];
    let check = |plan: &StrategyPlan| {
        let acts = plan.speech_acts();
        if acts[0] != wanted[0] || acts.iter().any(|a| !wanted.contains(a)) {
            Err(SchemaViolation::new(
                "plan.speech_acts",
                format!(
                    "speech acts must be the predicted labels {} then {}",
                    wanted[0], wanted[1]
                ),
            ))
        } else {
            Ok(())
        }
    };
    let checked = gateway.complete_checked(
        PromptKind::StrategyGen,
        &ctx,
        &ValidationContext::default(),
        &check,
        None,
    )?;
    if let Some(violation) = checked.unresolved {
        return Err(GatewayError::MalformedAfterRetries {
            kind: PromptKind::StrategyGen,
            attempts: gateway.config().max_retries + 1,
            violation,
        }
        .into());
    }
    Ok(checked.value)
}

/// Plan used when the planner is disabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefaultPlan {
    pub primary: MiLabel,
    pub secondary: Option<MiLabel>,
}

impl Default for DefaultPlan {
    fn default() -> Self {
        Self {
            primary: MiLabel::ComplexReflection,
            secondary: Some(MiLabel::OpenQuestion),
        }
    }
}

impl DefaultPlan {
    pub fn to_plan(&self) -> StrategyPlan {
        let mut acts = vec![self.primary];
        if let Some(s) = self.secondary.filter(|s| *s != self.primary) {
            acts.push(s);
        }
        let act_plans = acts
            .iter()
            .map(|act| ActPlan {
                act: *act,
                focus: vec![default_focus(*act)],
                key_points: Vec::new(),
                style_hints: Vec::new(),
            })
            .collect();
        StrategyPlan {
            plan: SpeechActPlan {
                speech_acts: acts.clone(),
                goals: acts
                    .iter()
                    .map(|act| ActGoal {
                        act: *act,
                        goal: format!("realize {act}"),
                    })
                    .collect(),
            },
            act_plans,
        }
    }
}

fn default_focus(act: MiLabel) -> FocusTag {
    match act {
        MiLabel::SimpleReflection => FocusTag::BasicRestatement,
        MiLabel::ComplexReflection => FocusTag::EmotionReflection,
        MiLabel::OpenQuestion => FocusTag::OpenProbing,
        MiLabel::ClosedQuestion => FocusTag::FactChecking,
        MiLabel::Affirm => FocusTag::SelfEfficacySupport,
        MiLabel::GiveInformation => FocusTag::InformationGiving,
        MiLabel::Advise => FocusTag::Advising,
        MiLabel::General => FocusTag::Bridging,
    }
}
