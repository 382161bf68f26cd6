//! One counseling turn, wired by [`SessionMode`].
//!
//! [`Engine::run_turn`] is a pure function of the prior memory, the dialogue
//! so far and the backend replies: it never mutates its inputs, so a failure
//! at any stage leaves the caller's state untouched.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::*;
use crate::gateway::{Gateway, GatewayError, PromptContext, PromptKind};
use crate::memory::{self, ConservatismViolation, MemoryConfig, MemoryState, SlotCueLexicon};
use crate::response::{
    self, CritiqueInput, DraftInput, GapRanking, GapWeights, IdeationConfig, IdeationInput,
    RefineGuard, ResponseError,
};
use crate::schema::{SchemaViolation, ValidationContext};
use crate::state_builder::{self, StateBuilderError};
use crate::strategy::{
    self, DefaultPlan, FewShotExample, LabelPair, SimilarityScorer, StrategyError,
};
use crate::text;

wire_enum! {
    /// Pipeline stage a failure is attributed to.
    pub enum Stage {
        StateBuilder => "state_builder",
        Memory => "memory",
        StrategyPlanner => "strategy_planner",
        ResponseGenerator => "response_generator",
        Baseline => "baseline",
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    StateBuilder(#[from] StateBuilderError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Response(#[from] ResponseError),
    #[error("user message is empty")]
    EmptyMessage,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub source: StageError,
}

fn at<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

/// The prompt kinds one turn issues in each mode, in call order.
pub fn expected_kinds(mode: SessionMode) -> Vec<PromptKind> {
    use PromptKind::*;
    let state = [CognitiveError, PppppiAlign, Tom];
    let memory = [TurnHistory, PppppiUpdate, SummaryUpdate];
    let planner = [LabelRound1, LabelRound2, StrategyGen];
    match mode {
        SessionMode::Baseline => vec![BaselineCounselor],
        SessionMode::Full => [
            &state[..],
            &memory,
            &planner,
            &[QuestionIdeation, Draft, Critic],
        ]
        .concat(),
        SessionMode::WoSB => [&memory[..], &planner, &[QuestionIdeation, Draft, Critic]].concat(),
        SessionMode::WoSP => [&state[..], &memory, &[QuestionIdeation, Draft, Critic]].concat(),
        SessionMode::WoQIC => [&state[..], &memory, &planner, &[Draft]].concat(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub memory: MemoryConfig,
    pub gap_weights: GapWeights,
    /// Turns within which a provenance index still counts as recent.
    pub provenance_window: u32,
    pub ideation: IdeationConfig,
    /// Few-shot examples retrieved for label prediction.
    pub fewshot_k: usize,
    /// Plan used when the strategy planner is disabled.
    pub default_plan: DefaultPlan,
    /// Previous agent turns shown to the critic.
    pub critic_history: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::default(),
            gap_weights: GapWeights::default(),
            provenance_window: 4,
            ideation: IdeationConfig::default(),
            fewshot_k: 6,
            default_plan: DefaultPlan::default(),
            critic_history: 3,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.gap_weights.is_valid() {
            return Err("gap weights must be finite and non-negative".into());
        }
        if self.provenance_window == 0 {
            return Err("provenance_window must be at least 1".into());
        }
        if self.ideation.k == 0 || self.fewshot_k == 0 {
            return Err("k values must be at least 1".into());
        }
        if self.memory.capacity == 0 || self.memory.recent_window == 0 {
            return Err("memory capacity and recent window must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything a turn produced besides the reply, kept for the transcript.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageArtifacts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<Vec<CognitiveErrorFlag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<PppppiSpans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tom: Option<TomState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_record: Option<TurnRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_updates: Vec<ConservatismViolation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<StrategyPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<GapRanking>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CandidateQuestion>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refine_guards: Vec<RefineGuard>,
}

#[derive(Debug, Clone, Copy)]
pub struct TurnInput<'a> {
    pub mode: SessionMode,
    /// The user's message this turn.
    pub message: &'a str,
    /// Pre-session concern. On the first turn it stands in for the message
    /// in the state builder and turn record.
    pub concern: &'a str,
    pub emotion: &'a str,
    pub language: &'a str,
    /// Dialogue before this turn, oldest first.
    pub history: &'a [DialogueTurn],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    pub reply: String,
    pub artifacts: StageArtifacts,
    /// Memory after the turn; `turn_index` is one past the prior value.
    pub memory: MemoryState,
}

/// Shared, read-only resources for running turns.
#[derive(Clone)]
pub struct Engine {
    config: EngineConfig,
    fewshot: Arc<Vec<FewShotExample>>,
    scorer: Arc<dyn SimilarityScorer>,
    cues: Arc<SlotCueLexicon>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("fewshot", &self.fewshot.len())
            .finish_non_exhaustive()
    }
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(
            EngineConfig::default(),
            strategy::builtin_store(),
            Arc::new(strategy::TokenOverlapCosine),
            SlotCueLexicon::builtin(),
        )
    }
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        fewshot: Vec<FewShotExample>,
        scorer: Arc<dyn SimilarityScorer>,
        cues: SlotCueLexicon,
    ) -> Self {
        Self {
            config,
            fewshot: Arc::new(fewshot),
            scorer,
            cues: Arc::new(cues),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn new_memory(&self) -> MemoryState {
        MemoryState::new(self.config.memory.capacity)
    }

    /// Gap ranking of the formulation as it stands after the last turn.
    pub fn current_ranking(&self, memory: &MemoryState) -> GapRanking {
        response::rank_gaps(
            &memory.summary.analysis,
            memory.turn_index.saturating_sub(1),
            self.config.provenance_window,
            &self.config.gap_weights,
        )
    }

    pub fn run_turn(
        &self,
        gateway: &Gateway,
        prior: &MemoryState,
        input: TurnInput<'_>,
    ) -> Result<TurnOutput, PipelineError> {
        if input.message.trim().is_empty() {
            return Err(PipelineError {
                stage: if input.mode == SessionMode::Baseline {
                    Stage::Baseline
                } else {
                    Stage::StateBuilder
                },
                source: StageError::EmptyMessage,
            });
        }
        let turn = prior.turn_index;
        let mut memory = prior.clone();
        memory.turn_index = turn + 1;

        let recent = self.recent_dialogue(input.history, input.message);
        if input.mode == SessionMode::Baseline {
            let reply = self.baseline(gateway, &input, &recent, turn)?;
            return Ok(TurnOutput {
                reply,
                artifacts: StageArtifacts::default(),
                memory,
            });
        }

        // On the first turn the pre-session concern is what gets analysed.
        let analysed = if turn == 0 && !input.concern.trim().is_empty() {
            input.concern
        } else {
            input.message
        };
        let mut analysed_turns = recent.clone();
        if let Some(last) = analysed_turns.last_mut() {
            last.text = analysed.to_string();
        }
        let mut art = StageArtifacts::default();

        let (spans, tom) = if input.mode == SessionMode::WoSB {
            (PppppiSpans::default(), TomState::neutral())
        } else {
            let built = state_builder::build_state(gateway, analysed, &analysed_turns, turn)
                .map_err(at(Stage::StateBuilder))?;
            art.flags = Some(built.flags);
            art.spans = Some(built.spans.clone());
            art.tom = Some(built.tom.clone());
            (built.spans, built.tom)
        };

        let record = memory::build_turn_record(gateway, analysed, &analysed_turns, turn)
            .map_err(at(Stage::Memory))?;
        let update = memory::update_pppppi(
            gateway,
            &prior.summary.analysis,
            &record,
            &spans,
            &tom,
            turn,
            &self.cues,
        )
        .map_err(at(Stage::Memory))?;
        let summary = memory::update_summary(
            gateway,
            &prior.summary,
            analysed,
            &record,
            &update.analysis,
            turn,
        )
        .map_err(at(Stage::Memory))?;
        memory.push_record(record.clone());
        memory.summary = summary;
        art.turn_record = Some(record.clone());
        art.rejected_updates = update.rejected;

        let plan = if input.mode == SessionMode::WoSP {
            self.config.default_plan.to_plan()
        } else {
            let examples = strategy::retrieve_fewshot(
                input.message,
                &self.fewshot,
                self.config.fewshot_k,
                &*self.scorer,
            )
            .map_err(StrategyError::from)
            .map_err(at(Stage::StrategyPlanner))?;
            let labels = strategy::predict_labels(gateway, input.message, &recent, &examples, turn)
                .map_err(at(Stage::StrategyPlanner))?;
            let plan = strategy::generate_strategy(
                gateway,
                &labels,
                input.message,
                &tom,
                &memory.summary,
                turn,
            )
            .map_err(at(Stage::StrategyPlanner))?;
            art.labels = Some(labels);
            plan
        };
        art.plan = Some(plan.clone());

        let ranking = response::rank_gaps(
            &memory.summary.analysis,
            turn,
            self.config.provenance_window,
            &self.config.gap_weights,
        );
        art.ranking = Some(ranking.clone());
        let with_qic = input.mode != SessionMode::WoQIC;
        let candidates = if with_qic {
            response::ideate_questions(
                gateway,
                IdeationInput {
                    ranking: &ranking,
                    analysis: &memory.summary.analysis,
                    recent_turns: &recent,
                    keywords: &record.keywords,
                    language: input.language,
                    turn_index: turn,
                },
                &self.config.ideation,
            )
            .map_err(at(Stage::ResponseGenerator))?
        } else {
            Vec::new()
        };
        let recent_records = memory.recent_records(self.config.memory.recent_window);
        let draft = response::generate_draft(
            gateway,
            DraftInput {
                plan: &plan,
                utterance: input.message,
                concern: input.concern,
                candidates: &candidates,
                memory: &memory.summary,
                recent_records: &recent_records,
                language: input.language,
                turn_index: turn,
            },
        )
        .map_err(at(Stage::ResponseGenerator))?;
        art.draft = Some(draft.clone());

        let reply = if with_qic {
            let agent_turns: Vec<String> = input
                .history
                .iter()
                .rev()
                .filter(|t| t.speaker == Speaker::Agent)
                .take(self.config.critic_history)
                .map(|t| t.text.clone())
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            let decision = response::critique(
                gateway,
                CritiqueInput {
                    draft: &draft,
                    recent_agent_turns: &agent_turns,
                    narrative: &memory.summary.core_narrative,
                    ranking: &ranking,
                    candidates: &candidates,
                    language: input.language,
                    turn_index: turn,
                },
            )
            .map_err(at(Stage::ResponseGenerator))?;
            let refined = response::refine(&draft, &decision, &candidates)
                .map_err(at(Stage::ResponseGenerator))?;
            art.critic = Some(decision);
            art.refine_guards = refined.guards;
            refined.text
        } else {
            draft
        };
        art.candidates = with_qic.then_some(candidates);

        Ok(TurnOutput {
            reply,
            artifacts: art,
            memory,
        })
    }

    fn recent_dialogue(&self, history: &[DialogueTurn], message: &str) -> Vec<DialogueTurn> {
        let keep = self.config.memory.recent_window.saturating_sub(1);
        let skip = history.len().saturating_sub(keep);
        history[skip..]
            .iter()
            .cloned()
            .chain([DialogueTurn::user(message)])
            .collect()
    }

    fn baseline(
        &self,
        gateway: &Gateway,
        input: &TurnInput<'_>,
        recent: &[DialogueTurn],
        turn: u32,
    ) -> Result<String, PipelineError> {
        let ctx = PromptContext::new(turn)
            .with("language", input.language)
            .with("turn_index", turn)
            .with("concern", input.concern)
            .with("emotion", input.emotion)
            .with("recent_turns", recent)
            .with("utterance", input.message);
        let check = |reply: &String| {
            let n = text::sentence_count(reply);
            if (1..=response::MAX_SENTENCES).contains(&n) {
                Ok(())
            } else {
                Err(SchemaViolation::new(
                    "$.sentences",
                    format!(
                        "reply has {n} sentences; 1 to {} allowed",
                        response::MAX_SENTENCES
                    ),
                ))
            }
        };
        let checked = gateway
            .complete_checked(
                PromptKind::BaselineCounselor,
                &ctx,
                &ValidationContext::default(),
                &check,
                Some(1),
            )
            .map_err(at(Stage::Baseline))?;
        match checked.unresolved {
            None => Ok(checked.value),
            Some(_) => Err(PipelineError {
                stage: Stage::Baseline,
                source: ResponseError::LengthViolation {
                    sentences: text::sentence_count(&checked.value),
                }
                .into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, MockBackend, PromptTemplates, ScriptedBackend};
    use std::collections::BTreeMap;

    fn input<'a>(
        mode: SessionMode,
        message: &'a str,
        history: &'a [DialogueTurn],
    ) -> TurnInput<'a> {
        TurnInput {
            mode,
            message,
            concern: "I failed the exam and I always mess things up",
            emotion: "shame",
            language: "en",
            history,
        }
    }

    fn multiset(kinds: impl IntoIterator<Item = PromptKind>) -> BTreeMap<PromptKind, usize> {
        let mut m = BTreeMap::new();
        for k in kinds {
            *m.entry(k).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn each_mode_issues_its_expected_calls() {
        let engine = Engine::default();
        for mode in SessionMode::ALL {
            let gw = Gateway::mock();
            let out = engine
                .run_turn(
                    &gw,
                    &engine.new_memory(),
                    input(*mode, "Hello, I want to talk", &[]),
                )
                .unwrap();
            let got: Vec<_> = gw.ledger().iter().map(|e| e.kind).collect();
            assert_eq!(
                multiset(got.clone()),
                multiset(expected_kinds(*mode)),
                "{mode}"
            );
            assert_eq!(got, expected_kinds(*mode), "{mode} call order");
            assert_eq!(out.memory.turn_index, 1);
            assert!(!out.reply.is_empty());
        }
    }

    #[test]
    fn first_turn_analyses_the_concern() {
        let engine = Engine::default();
        let gw = Gateway::mock();
        let out = engine
            .run_turn(
                &gw,
                &engine.new_memory(),
                input(SessionMode::Full, "Hello", &[]),
            )
            .unwrap();
        let flags = out.artifacts.flags.unwrap();
        assert!(flags
            .iter()
            .any(|f| f.name == CognitiveError::Overgeneralization && f.present));
        assert_eq!(out.memory.turn_history.len(), 1);
    }

    #[test]
    fn full_turn_respects_reply_contract_and_records_artifacts() {
        let engine = Engine::default();
        let gw = Gateway::mock();
        let out = engine
            .run_turn(
                &gw,
                &engine.new_memory(),
                input(SessionMode::Full, "Hello", &[]),
            )
            .unwrap();
        assert!(text::sentence_count(&out.reply) <= 4);
        assert!(text::question_count(&out.reply) <= 1);
        let a = &out.artifacts;
        assert!(a.flags.is_some() && a.spans.is_some() && a.tom.is_some());
        assert!(a.labels.is_some() && a.plan.is_some() && a.ranking.is_some());
        assert!(a.candidates.is_some() && a.draft.is_some() && a.critic.is_some());
    }

    #[test]
    fn ablations_leave_out_their_artifacts() {
        let engine = Engine::default();
        let run = |mode| {
            engine
                .run_turn(
                    &Gateway::mock(),
                    &engine.new_memory(),
                    input(mode, "Hello", &[]),
                )
                .unwrap()
                .artifacts
        };
        let wosb = run(SessionMode::WoSB);
        assert!(wosb.flags.is_none() && wosb.tom.is_none());
        let wosp = run(SessionMode::WoSP);
        assert!(wosp.labels.is_none());
        assert_eq!(wosp.plan.unwrap(), DefaultPlan::default().to_plan());
        let woqic = run(SessionMode::WoQIC);
        assert!(woqic.candidates.is_none() && woqic.critic.is_none());
    }

    #[test]
    fn failure_is_attributed_to_its_stage() {
        let backend = ScriptedBackend::new()
            .always(PromptKind::LabelRound1, "not json")
            .with_fallback(Arc::new(MockBackend::builtin()));
        let gw = Gateway::new(
            Arc::new(backend),
            Arc::new(PromptTemplates::builtin()),
            GatewayConfig::mock(),
        );
        let engine = Engine::default();
        let prior = engine.new_memory();
        let err = engine
            .run_turn(&gw, &prior, input(SessionMode::Full, "Hello", &[]))
            .unwrap_err();
        assert_eq!(err.stage, Stage::StrategyPlanner);
        assert_eq!(prior, engine.new_memory());
    }

    #[test]
    fn empty_message_is_rejected_before_any_call() {
        let engine = Engine::default();
        let gw = Gateway::mock();
        let err = engine
            .run_turn(
                &gw,
                &engine.new_memory(),
                input(SessionMode::Full, " ", &[]),
            )
            .unwrap_err();
        assert_eq!(err.source, StageError::EmptyMessage);
        assert_eq!(gw.ledger_len(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        let bad = EngineConfig {
            provenance_window: 0,
            ..EngineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
