//! Uniform access to text-generation backends.
//!
//! [`Gateway::complete`] renders the template for a [`PromptKind`], calls the
//! backend, parses the reply as JSON, validates it against the kind's schema and
//! retries with the violation appended to the prompt. Exactly one
//! [`CallLedgerEntry`] is recorded per call, whatever the outcome.

mod backend;
mod http;
mod mock;
mod parse;
mod template;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::schema::{Schema, SchemaTag, SchemaViolation, ValidationContext};

pub use backend::{Backend, BackendError, BackendRequest, FnBackend, ScriptedBackend};
pub use http::{HttpBackend, API_KEY_ENV};
pub use mock::{MockBackend, MockRules, RuleTableInvalid};
pub use parse::{parse_document, strip_reasoning};
pub use template::{PromptTemplates, Template, TemplateError};

wire_enum! {
    /// One member per model-invoking pipeline stage, plus the baseline counselor.
    pub enum PromptKind {
        CognitiveError => "cognitive_error",
        PppppiAlign => "pppppi_align",
        Tom => "tom",
        TurnHistory => "turn_history",
        PppppiUpdate => "pppppi_update",
        SummaryUpdate => "summary_update",
        LabelRound1 => "label_round1",
        LabelRound2 => "label_round2",
        StrategyGen => "strategy_gen",
        QuestionIdeation => "question_ideation",
        Draft => "draft",
        Critic => "critic",
        BaselineCounselor => "baseline_counselor",
    }
}

impl PromptKind {
    /// The schema a reply of this kind must satisfy.
    pub fn schema(self) -> SchemaTag {
        match self {
            PromptKind::CognitiveError => SchemaTag::CognitiveErrors,
            PromptKind::PppppiAlign => SchemaTag::PppppiSpans,
            PromptKind::Tom => SchemaTag::TomState,
            PromptKind::TurnHistory => SchemaTag::TurnRecord,
            PromptKind::PppppiUpdate => SchemaTag::PppppiUpdate,
            PromptKind::SummaryUpdate => SchemaTag::SummaryUpdate,
            PromptKind::LabelRound1 | PromptKind::LabelRound2 => SchemaTag::LabelPrediction,
            PromptKind::StrategyGen => SchemaTag::StrategyPlan,
            PromptKind::QuestionIdeation => SchemaTag::CandidateQuestions,
            PromptKind::Critic => SchemaTag::CriticDecision,
            PromptKind::Draft | PromptKind::BaselineCounselor => SchemaTag::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpProvider,
    #[default]
    Mock,
}

/// Per-kind generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindSettings {
    pub temperature: f32,
    /// Ask for a `<reasoning>` preamble, stripped before parsing.
    pub reasoning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub model_name: String,
    pub base_url: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Requests per minute; 0 disables limiting.
    pub rate_limit: u32,
    pub temperature: f32,
    pub kinds: BTreeMap<PromptKind, KindSettings>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            model_name: "gpt-4o".into(),
            base_url: "https://api.openai.com/v1".into(),
            max_retries: 2,
            timeout_secs: 60,
            rate_limit: 60,
            temperature: 0.0,
            kinds: BTreeMap::new(),
        }
    }
}

impl GatewayConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn settings_for(&self, kind: PromptKind) -> KindSettings {
        self.kinds.get(&kind).copied().unwrap_or(KindSettings {
            temperature: self.temperature,
            reasoning: kind == PromptKind::Tom,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedgerEntry {
    pub kind: PromptKind,
    pub turn_index: u32,
    pub rendered_prompt: String,
    pub raw_response: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unavailable for {kind}: {message}")]
    BackendUnavailable { kind: PromptKind, message: String },
    #[error("{kind} output still malformed after {attempts} attempts: {violation}")]
    MalformedAfterRetries {
        kind: PromptKind,
        attempts: u32,
        violation: SchemaViolation,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Template variables plus the turn the call belongs to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptContext {
    pub turn_index: u32,
    pub vars: Map<String, Value>,
}

impl PromptContext {
    pub fn new(turn_index: u32) -> Self {
        Self {
            turn_index,
            vars: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        let value = serde_json::to_value(value).expect("prompt variables are plain data");
        self.vars.insert(key.to_string(), value);
        self
    }
}

/// A validated value plus a domain check that stayed unresolved when the
/// retry budget ran out. The caller decides how to handle it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checked<T> {
    pub value: T,
    pub unresolved: Option<SchemaViolation>,
}

const REASONING_INSTRUCTION: &str =
    "Before answering, think step by step inside <reasoning></reasoning> tags. \
After the closing tag output only the requested JSON.";

pub struct Gateway {
    backend: Arc<dyn Backend>,
    templates: Arc<PromptTemplates>,
    config: GatewayConfig,
    ledger: Mutex<Vec<CallLedgerEntry>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("calls", &self.ledger.lock().len())
            .finish()
    }
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn Backend>,
        templates: Arc<PromptTemplates>,
        config: GatewayConfig,
    ) -> Self {
        Self {
            backend,
            templates,
            config,
            ledger: Mutex::new(Vec::new()),
        }
    }

    /// A gateway over the shipped mock rule table and templates.
    pub fn mock() -> Self {
        Self::new(
            Arc::new(MockBackend::builtin()),
            Arc::new(PromptTemplates::builtin()),
            GatewayConfig::mock(),
        )
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn backend(&self) -> Arc<dyn Backend> {
        Arc::clone(&self.backend)
    }

    pub fn templates(&self) -> Arc<PromptTemplates> {
        Arc::clone(&self.templates)
    }

    /// All calls so far, in issue order.
    pub fn ledger(&self) -> Vec<CallLedgerEntry> {
        self.ledger.lock().clone()
    }

    pub fn ledger_len(&self) -> usize {
        self.ledger.lock().len()
    }

    pub fn ledger_since(&self, start: usize) -> Vec<CallLedgerEntry> {
        let ledger = self.ledger.lock();
        ledger.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn complete<T: Schema>(
        &self,
        kind: PromptKind,
        ctx: &PromptContext,
        vctx: &ValidationContext<'_>,
    ) -> Result<T, GatewayError> {
        self.complete_checked(kind, ctx, vctx, &|_: &T| Ok(()), None)
            .map(|checked| checked.value)
    }

    /// Like [`complete`](Self::complete), with an extra domain `check` run on
    /// each schema-valid reply. A failing check is fed back like a schema
    /// violation while budget remains (at most `check_budget` retries, capped by
    /// `max_retries`); after that the last valid value is returned with the
    /// violation in [`Checked::unresolved`].
    pub fn complete_checked<T: Schema>(
        &self,
        kind: PromptKind,
        ctx: &PromptContext,
        vctx: &ValidationContext<'_>,
        check: &dyn Fn(&T) -> Result<(), SchemaViolation>,
        check_budget: Option<u32>,
    ) -> Result<Checked<T>, GatewayError> {
        debug_assert_eq!(
            T::TAG,
            kind.schema(),
            "schema type does not match prompt kind"
        );
        let settings = self.config.settings_for(kind);
        let rendered = match self.templates.render(kind, &ctx.vars) {
            Ok(prompt) => prompt,
            Err(e) => {
                self.record(kind, ctx.turn_index, String::new(), String::new(), 0);
                return Err(e.into());
            }
        };
        let base_prompt = if settings.reasoning {
            format!("{rendered}\n\n{REASONING_INSTRUCTION}")
        } else {
            rendered
        };
        let max_attempts = self.config.max_retries + 1;
        let check_budget = check_budget
            .unwrap_or(self.config.max_retries)
            .min(self.config.max_retries);

        let mut prompt = base_prompt.clone();
        let mut attempts = 0;
        let mut checks_used = 0;
        let mut raw = String::new();
        let outcome = loop {
            attempts += 1;
            let request = BackendRequest {
                kind,
                prompt: &prompt,
                vars: &ctx.vars,
                attempt: attempts,
                settings,
            };
            raw = match self.backend.complete(&request) {
                Ok(text) => text,
                Err(e) => {
                    break Err(GatewayError::BackendUnavailable {
                        kind,
                        message: e.to_string(),
                    })
                }
            };
            let parsed = parse_document(&raw, T::TAG).and_then(|doc| T::from_document(&doc, vctx));
            let violation = match parsed {
                Ok(value) => match check(&value) {
                    Ok(()) => {
                        break Ok(Checked {
                            value,
                            unresolved: None,
                        })
                    }
                    Err(v) if attempts < max_attempts && checks_used < check_budget => {
                        checks_used += 1;
                        v
                    }
                    Err(v) => {
                        break Ok(Checked {
                            value,
                            unresolved: Some(v),
                        })
                    }
                },
                Err(v) if attempts < max_attempts => v,
                Err(violation) => {
                    break Err(GatewayError::MalformedAfterRetries {
                        kind,
                        attempts,
                        violation,
                    })
                }
            };
            tracing::debug!(%kind, attempt = attempts, %violation, "retrying model call");
            prompt = format!(
                "{base_prompt}\n\nYour previous reply was rejected: {violation}. \
                 Reply again with corrected JSON only."
            );
        };
        self.record(kind, ctx.turn_index, base_prompt, raw, attempts);
        outcome
    }

    fn record(
        &self,
        kind: PromptKind,
        turn_index: u32,
        rendered_prompt: String,
        raw_response: String,
        attempts: u32,
    ) {
        self.ledger.lock().push(CallLedgerEntry {
            kind,
            turn_index,
            rendered_prompt,
            raw_response,
            attempts,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::*;

    fn gateway_with(backend: impl Backend + 'static) -> Gateway {
        Gateway::new(
            Arc::new(backend),
            Arc::new(PromptTemplates::builtin()),
            GatewayConfig::mock(),
        )
    }

    fn critic_ctx() -> PromptContext {
        PromptContext::new(0)
            .with("draft", "That sounds hard.")
            .with("recent_agent_turns", Vec::<String>::new())
            .with("narrative", "")
            .with("ranking", Vec::<Value>::new())
            .with("candidates", Vec::<Value>::new())
    }

    #[test]
    fn mock_flags_overgeneralization() {
        let gw = Gateway::mock();
        let ctx = PromptContext::new(0).with("utterance", "I always ruin everything");
        let flags: Vec<CognitiveErrorFlag> = gw
            .complete(
                PromptKind::CognitiveError,
                &ctx,
                &ValidationContext::with_source("I always ruin everything"),
            )
            .unwrap();
        let over = flags
            .iter()
            .find(|f| f.name == CognitiveError::Overgeneralization)
            .unwrap();
        assert!(over.present);
        assert_eq!(over.spans, vec!["always".to_string()]);
        assert_eq!(gw.ledger().len(), 1);
        assert_eq!(gw.ledger()[0].attempts, 1);
    }

    #[test]
    fn malformed_critic_retries_then_fails() {
        let bad = r#"{"verdict":"needs_fix","rationale":"Redundant.","ops":{"question":{"action":"replace"}}}"#;
        let gw = gateway_with(ScriptedBackend::new().always(PromptKind::Critic, bad));
        let err = gw
            .complete::<CriticDecision>(
                PromptKind::Critic,
                &critic_ctx(),
                &ValidationContext::default(),
            )
            .unwrap_err();
        match err {
            GatewayError::MalformedAfterRetries {
                attempts,
                violation,
                ..
            } => {
                assert_eq!(attempts, 3);
                assert_eq!(violation.path, "ops.question.text");
            }
            other => panic!("unexpected {other:?}"),
        }
        let ledger = gw.ledger();
        assert_eq!(ledger.len(), 1);
        assert_eq!(ledger[0].attempts, 3);
    }

    #[test]
    fn retry_prompt_carries_violation() {
        let bad = r#"{"verdict":"needs_fix","rationale":"Redundant.","ops":{"question":{"action":"replace"}}}"#;
        let good = r#"{"verdict":"ok","rationale":"Fine.","ops":{"question":{"action":"keep"}}}"#;
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&seen);
        let gw = gateway_with(FnBackend::new(move |req: &BackendRequest<'_>| {
            sink.lock().push(req.prompt.to_string());
            Ok(if req.attempt == 1 { bad } else { good }.to_string())
        }));
        let d: CriticDecision = gw
            .complete(
                PromptKind::Critic,
                &critic_ctx(),
                &ValidationContext::default(),
            )
            .unwrap();
        assert_eq!(d.verdict, Verdict::Ok);
        let prompts = seen.lock();
        assert_eq!(prompts.len(), 2);
        assert!(!prompts[0].contains("rejected"));
        assert!(prompts[1].contains("ops.question.text"));
        assert_eq!(gw.ledger()[0].attempts, 2);
    }

    #[test]
    fn zero_retries_fails_on_first_violation() {
        let config = GatewayConfig {
            max_retries: 0,
            ..GatewayConfig::mock()
        };
        let gw = Gateway::new(
            Arc::new(ScriptedBackend::new().always(PromptKind::Critic, "not json")),
            Arc::new(PromptTemplates::builtin()),
            config,
        );
        let err = gw
            .complete::<CriticDecision>(
                PromptKind::Critic,
                &critic_ctx(),
                &ValidationContext::default(),
            )
            .unwrap_err();
        assert!(matches!(
            err,
            GatewayError::MalformedAfterRetries { attempts: 1, .. }
        ));
    }

    #[test]
    fn backend_failure_is_typed_and_recorded() {
        let gw = gateway_with(FnBackend::new(|_: &BackendRequest<'_>| {
            Err(BackendError::Transport("connection refused".into()))
        }));
        let err = gw
            .complete::<CriticDecision>(
                PromptKind::Critic,
                &critic_ctx(),
                &ValidationContext::default(),
            )
            .unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnavailable { .. }));
        assert_eq!(gw.ledger().len(), 1);
    }

    #[test]
    fn missing_variable_is_recorded() {
        let gw = Gateway::mock();
        let err = gw
            .complete::<CriticDecision>(
                PromptKind::Critic,
                &PromptContext::new(2),
                &ValidationContext::default(),
            )
            .unwrap_err();
        assert!(matches!(
            err,
            GatewayError::Template(TemplateError::MissingVariable { .. })
        ));
        let ledger = gw.ledger();
        assert_eq!(ledger.len(), 1);
        assert_eq!(ledger[0].attempts, 0);
        assert_eq!(ledger[0].turn_index, 2);
    }

    #[test]
    fn unresolved_check_is_reported_not_fatal() {
        let gw = Gateway::mock();
        let ctx = PromptContext::new(0).with("utterance", "I went for a walk");
        let checked = gw
            .complete_checked::<Vec<CognitiveErrorFlag>>(
                PromptKind::CognitiveError,
                &ctx,
                &ValidationContext::with_source("I went for a walk"),
                &|_| Err(SchemaViolation::new("$", "always rejected")),
                None,
            )
            .unwrap();
        assert!(checked.unresolved.is_some());
        assert_eq!(gw.ledger()[0].attempts, 3);
    }

    #[test]
    fn reasoning_preamble_only_where_configured() {
        let config = GatewayConfig::default();
        assert!(config.settings_for(PromptKind::Tom).reasoning);
        assert!(!config.settings_for(PromptKind::Draft).reasoning);
        assert_eq!(config.settings_for(PromptKind::Draft).temperature, 0.0);
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
            backend = "http_provider"
            model_name = "local-model"
            max_retries = 1

            [kinds.draft]
            temperature = 0.7
            reasoning = false
        "#;
        let config: GatewayConfig = toml::from_str(text).unwrap();
        assert_eq!(config.backend, BackendKind::HttpProvider);
        assert_eq!(config.max_retries, 1);
        assert_eq!(config.settings_for(PromptKind::Draft).temperature, 0.7);
        assert_eq!(config.rate_limit, 60);
    }
}
