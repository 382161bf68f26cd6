//! Structural validation of model output documents.
//!
//! Every stage output passes through [`Schema::from_document`] before any
//! pipeline code sees it. Violations name the first offending path (for example
//! `ops.question.text` or `[2].spans`) so the gateway can feed the message back
//! to the model on retry.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::domain::*;
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("schema violation at `{path}`: {reason}")]
pub struct SchemaViolation {
    pub path: String,
    pub reason: String,
}

impl SchemaViolation {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        let path = path.into();
        Self {
            path: if path.is_empty() { "$".into() } else { path },
            reason: reason.into(),
        }
    }
}

/// Names the expected shape of a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaTag {
    CognitiveErrors,
    PppppiSpans,
    TomState,
    TurnRecord,
    PppppiUpdate,
    SummaryUpdate,
    LabelPrediction,
    StrategyPlan,
    CandidateQuestions,
    CriticDecision,
    Text,
}

/// Facts outside the document that some invariants depend on.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationContext<'a> {
    /// Utterance that spans must be verbatim substrings of.
    pub source: Option<&'a str>,
    /// Current turn; provenance indices may not exceed it.
    pub turn_index: Option<u32>,
}

impl<'a> ValidationContext<'a> {
    pub fn with_source(source: &'a str) -> Self {
        Self {
            source: Some(source),
            turn_index: None,
        }
    }
}

/// A validated value of any schema, returned by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum DomainValue {
    CognitiveErrors(Vec<CognitiveErrorFlag>),
    PppppiSpans(PppppiSpans),
    TomState(TomState),
    TurnRecord(TurnRecord),
    PppppiUpdate(PppppiAnalysis),
    SummaryUpdate(SummaryUpdate),
    LabelPrediction(LabelPrediction),
    StrategyPlan(StrategyPlan),
    CandidateQuestions(Vec<CandidateQuestion>),
    CriticDecision(CriticDecision),
    Text(String),
}

/// A type that can be checked out of an untyped document.
pub trait Schema: Sized {
    const TAG: SchemaTag;

    fn from_document(doc: &Value, ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation>;
}

/// Validates `doc` against `tag`, checking every invariant of the target type.
pub fn validate(
    doc: &Value,
    tag: SchemaTag,
    ctx: &ValidationContext<'_>,
) -> Result<DomainValue, SchemaViolation> {
    Ok(match tag {
        SchemaTag::CognitiveErrors => {
            DomainValue::CognitiveErrors(Schema::from_document(doc, ctx)?)
        }
        SchemaTag::PppppiSpans => DomainValue::PppppiSpans(Schema::from_document(doc, ctx)?),
        SchemaTag::TomState => DomainValue::TomState(Schema::from_document(doc, ctx)?),
        SchemaTag::TurnRecord => DomainValue::TurnRecord(Schema::from_document(doc, ctx)?),
        SchemaTag::PppppiUpdate => DomainValue::PppppiUpdate(Schema::from_document(doc, ctx)?),
        SchemaTag::SummaryUpdate => DomainValue::SummaryUpdate(Schema::from_document(doc, ctx)?),
        SchemaTag::LabelPrediction => {
            DomainValue::LabelPrediction(Schema::from_document(doc, ctx)?)
        }
        SchemaTag::StrategyPlan => DomainValue::StrategyPlan(Schema::from_document(doc, ctx)?),
        SchemaTag::CandidateQuestions => {
            DomainValue::CandidateQuestions(Schema::from_document(doc, ctx)?)
        }
        SchemaTag::CriticDecision => DomainValue::CriticDecision(Schema::from_document(doc, ctx)?),
        SchemaTag::Text => DomainValue::Text(Schema::from_document(doc, ctx)?),
    })
}

// ---------------------------------------------------------------------------
// Path-tracking reader

#[derive(Clone)]
struct Node<'a> {
    value: &'a Value,
    path: String,
}

impl<'a> Node<'a> {
    fn root(value: &'a Value) -> Self {
        Self {
            value,
            path: String::new(),
        }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, SchemaViolation> {
        Err(SchemaViolation::new(self.path.clone(), reason))
    }

    fn child_path(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        }
    }

    fn object(&self) -> Result<&'a Map<String, Value>, SchemaViolation> {
        match self.value {
            Value::Object(m) => Ok(m),
            other => self.fail(format!("expected object, found {}", kind_of(other))),
        }
    }

    fn field(&self, name: &str) -> Result<Node<'a>, SchemaViolation> {
        let obj = self.object()?;
        match obj.get(name) {
            Some(v) => Ok(Node {
                value: v,
                path: self.child_path(name),
            }),
            None => Err(SchemaViolation::new(
                self.child_path(name),
                "missing required field",
            )),
        }
    }

    /// Absent and `null` both read as `None`.
    fn opt_field(&self, name: &str) -> Result<Option<Node<'a>>, SchemaViolation> {
        let obj = self.object()?;
        Ok(match obj.get(name) {
            None | Some(Value::Null) => None,
            Some(v) => Some(Node {
                value: v,
                path: self.child_path(name),
            }),
        })
    }

    fn array(&self) -> Result<Vec<Node<'a>>, SchemaViolation> {
        match self.value {
            Value::Array(items) => Ok(items
                .iter()
                .enumerate()
                .map(|(i, v)| Node {
                    value: v,
                    path: format!("{}[{i}]", self.path),
                })
                .collect()),
            other => self.fail(format!("expected array, found {}", kind_of(other))),
        }
    }

    fn string(&self) -> Result<String, SchemaViolation> {
        match self.value {
            Value::String(s) => Ok(s.clone()),
            other => self.fail(format!("expected string, found {}", kind_of(other))),
        }
    }

    fn nonempty_string(&self) -> Result<String, SchemaViolation> {
        let s = self.string()?;
        if s.trim().is_empty() {
            return self.fail("must not be empty");
        }
        Ok(s)
    }

    fn string_list(&self) -> Result<Vec<String>, SchemaViolation> {
        self.array()?.iter().map(Node::string).collect()
    }

    /// Booleans are accepted as `true`/`false` or `1`/`0`.
    fn flag(&self) -> Result<bool, SchemaViolation> {
        match self.value {
            Value::Bool(b) => Ok(*b),
            Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
            Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
            other => self.fail(format!("expected boolean or 0/1, found {}", kind_of(other))),
        }
    }

    fn number(&self) -> Result<f64, SchemaViolation> {
        match self.value.as_f64() {
            Some(x) if x.is_finite() => Ok(x),
            _ => self.fail(format!("expected number, found {}", kind_of(self.value))),
        }
    }

    fn index(&self) -> Result<u32, SchemaViolation> {
        match self.value.as_u64() {
            Some(x) if x <= u32::MAX as u64 => Ok(x as u32),
            _ => self.fail("expected a non-negative integer turn index"),
        }
    }

    fn enumeration<E>(&self) -> Result<E, SchemaViolation>
    where
        E: FromStr<Err = UnknownVariant>,
    {
        let raw = self.string()?;
        raw.parse::<E>().or_else(|e| self.fail(e.to_string()))
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_spans(
    node: &Node<'_>,
    ctx: &ValidationContext<'_>,
) -> Result<Vec<String>, SchemaViolation> {
    let mut spans = Vec::new();
    for item in node.array()? {
        let span = item.nonempty_string()?;
        if let Some(source) = ctx.source {
            if !source.contains(span.as_str()) {
                return item.fail(format!("span `{span}` is not a substring of the utterance"));
            }
        }
        spans.push(span);
    }
    Ok(spans)
}

fn slot_keyed<'a>(node: &Node<'a>) -> Result<Vec<(SlotId, Node<'a>)>, SchemaViolation> {
    let obj = node.object()?;
    for key in obj.keys() {
        if key.parse::<SlotId>().is_err() {
            return Err(SchemaViolation::new(
                node.child_path(key),
                "unknown slot key",
            ));
        }
    }
    canonical_slot_order()
        .into_iter()
        .map(|slot| Ok((slot, node.field(slot.as_str())?)))
        .collect()
}

fn at_most_sentences(node: &Node<'_>, max: usize) -> Result<String, SchemaViolation> {
    let s = node.nonempty_string()?;
    let n = text::sentence_count(&s);
    if n > max {
        return node.fail(format!("expected at most {max} sentences, found {n}"));
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Schema implementations

impl Schema for Vec<CognitiveErrorFlag> {
    const TAG: SchemaTag = SchemaTag::CognitiveErrors;

    fn from_document(doc: &Value, ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let items = root.array()?;
        let mut seen: Vec<Option<CognitiveErrorFlag>> = vec![None; CognitiveError::ALL.len()];
        for item in &items {
            let name: CognitiveError = item.field("name")?.enumeration()?;
            let present = item.field("present")?.flag()?;
            let spans_node = item.field("spans")?;
            let spans = check_spans(&spans_node, ctx)?;
            if !present && !spans.is_empty() {
                return spans_node.fail("spans must be empty when present is false");
            }
            let pos = CognitiveError::ALL
                .iter()
                .position(|c| *c == name)
                .unwrap_or(0);
            if seen[pos].is_some() {
                return item
                    .field("name")?
                    .fail(format!("duplicate category {name}"));
            }
            seen[pos] = Some(CognitiveErrorFlag {
                name,
                present,
                spans,
            });
        }
        let mut out = Vec::with_capacity(4);
        for (category, flag) in CognitiveError::ALL.iter().zip(seen) {
            match flag {
                Some(f) => out.push(f),
                None => return root.fail(format!("missing category {category}")),
            }
        }
        Ok(out)
    }
}

impl Schema for PppppiSpans {
    const TAG: SchemaTag = SchemaTag::PppppiSpans;

    fn from_document(doc: &Value, ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let mut out = PppppiSpans::default();
        for (slot, node) in slot_keyed(&root)? {
            out[slot] = check_spans(&node, ctx)?;
        }
        Ok(out)
    }
}

impl Schema for TomState {
    const TAG: SchemaTag = SchemaTag::TomState;

    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        Ok(TomState {
            beliefs: root.field("beliefs")?.string_list()?,
            desires: root.field("desires")?.string_list()?,
            intentions: root.field("intentions")?.string_list()?,
            intent_label: root.field("intent_label")?.enumeration()?,
        })
    }
}

impl Schema for TurnRecord {
    const TAG: SchemaTag = SchemaTag::TurnRecord;

    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let summary = at_most_sentences(&root.field("summary")?, 2)?;
        let keywords = root.field("keywords")?.string_list()?;
        let mut events = Vec::new();
        for item in root.field("events")?.array()? {
            events.push(TurnEvent {
                event: item.field("event")?.nonempty_string()?,
                context: item.field("context")?.string()?,
                impact_level: item.field("impact_level")?.enumeration()?,
            });
        }
        let mut emotions = Vec::new();
        for item in root.field("emotions")?.array()? {
            emotions.push(EmotionTrigger {
                emotion: item.field("emotion")?.nonempty_string()?,
                trigger: item.field("trigger")?.string()?,
            });
        }
        Ok(TurnRecord {
            summary,
            keywords,
            events,
            emotions,
        })
    }
}

impl Schema for PppppiAnalysis {
    const TAG: SchemaTag = SchemaTag::PppppiUpdate;

    fn from_document(doc: &Value, ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let mut out = PppppiAnalysis::default();
        for (slot, node) in slot_keyed(&root)? {
            let provenance = match node.opt_field("provenance")? {
                None => Vec::new(),
                Some(p) => {
                    let mut idx = Vec::new();
                    for item in p.array()? {
                        let i = item.index()?;
                        if let Some(turn) = ctx.turn_index {
                            if i > turn {
                                return item
                                    .fail(format!("turn index {i} exceeds current turn {turn}"));
                            }
                        }
                        idx.push(i);
                    }
                    idx
                }
            };
            out[slot] = PppppiEntry {
                text: node.field("text")?.string()?,
                evidence: node.field("evidence")?.string_list()?,
                is_inferred: node.field("is_inferred")?.flag()?,
                changed: node.field("changed")?.flag()?,
                provenance,
            };
        }
        Ok(out)
    }
}

impl Schema for SummaryUpdate {
    const TAG: SchemaTag = SchemaTag::SummaryUpdate;

    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        Ok(SummaryUpdate {
            core_narrative: at_most_sentences(&root.field("core_narrative")?, 2)?,
            core_emotion: root.field("core_emotion")?.string_list()?,
            recurring_themes: root.field("recurring_themes")?.string_list()?,
        })
    }
}

impl Schema for LabelPrediction {
    const TAG: SchemaTag = SchemaTag::LabelPrediction;

    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        Ok(LabelPrediction {
            label: root.field("label")?.enumeration()?,
            rationale: root.field("rationale")?.nonempty_string()?,
        })
    }
}

impl Schema for StrategyPlan {
    const TAG: SchemaTag = SchemaTag::StrategyPlan;

    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let plan_node = root.field("plan")?;
        let acts_node = plan_node.field("speech_acts")?;
        let mut speech_acts = Vec::new();
        for item in acts_node.array()? {
            let act: MiLabel = item.enumeration()?;
            if speech_acts.contains(&act) {
                return item.fail(format!("duplicate speech act {act}"));
            }
            speech_acts.push(act);
        }
        if speech_acts.is_empty() || speech_acts.len() > 2 {
            return acts_node.fail("expected a primary act and at most one secondary act");
        }
        let mut goals = Vec::new();
        for item in plan_node.field("goals")?.array()? {
            let act_node = item.field("act")?;
            let act: MiLabel = act_node.enumeration()?;
            if !speech_acts.contains(&act) {
                return act_node.fail(format!("{act} is not among speech_acts"));
            }
            goals.push(ActGoal {
                act,
                goal: item.field("goal")?.nonempty_string()?,
            });
        }
        let plans_node = root.field("act_plans")?;
        let mut act_plans: Vec<ActPlan> = Vec::new();
        for item in plans_node.array()? {
            let act_node = item.field("act")?;
            let act: MiLabel = act_node.enumeration()?;
            if !speech_acts.contains(&act) {
                return act_node.fail(format!("{act} is not among speech_acts"));
            }
            if act_plans.iter().any(|p| p.act == act) {
                return act_node.fail(format!("duplicate act plan for {act}"));
            }
            let mut focus = Vec::new();
            for tag in item.field("focus")?.array()? {
                focus.push(tag.enumeration::<FocusTag>()?);
            }
            act_plans.push(ActPlan {
                act,
                focus,
                key_points: item.field("key_points")?.string_list()?,
                style_hints: item.field("style_hints")?.string_list()?,
            });
        }
        let planned: BTreeSet<_> = act_plans.iter().map(|p| p.act).collect();
        let declared: BTreeSet<_> = speech_acts.iter().copied().collect();
        if planned != declared {
            let missing: Vec<_> = declared.difference(&planned).map(|l| l.as_str()).collect();
            return plans_node.fail(format!("missing act plan for {}", missing.join(", ")));
        }
        Ok(StrategyPlan {
            plan: SpeechActPlan { speech_acts, goals },
            act_plans,
        })
    }
}

fn candidate(item: &Node<'_>) -> Result<CandidateQuestion, SchemaViolation> {
    let question_node = item.field("question")?;
    let question = question_node.nonempty_string()?;
    if !text::is_single_question(&question) {
        return question_node.fail("must be a single sentence ending with a question mark");
    }
    let conf_node = item.field("confidence")?;
    let confidence = conf_node.number()?;
    if !(0.0..=1.0).contains(&confidence) {
        return conf_node.fail(format!("confidence {confidence} outside [0,1]"));
    }
    Ok(CandidateQuestion {
        slot: item.field("slot")?.enumeration()?,
        intent: item.field("intent")?.nonempty_string()?,
        question,
        why: item.field("why")?.string()?,
        confidence,
    })
}

impl Schema for Vec<CandidateQuestion> {
    const TAG: SchemaTag = SchemaTag::CandidateQuestions;

    /// Accepts a bare array or `{"candidates": [...]}`.
    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let list = match doc {
            Value::Object(_) => root.field("candidates")?,
            _ => root,
        };
        list.array()?.iter().map(candidate).collect()
    }
}

impl Schema for CriticDecision {
    const TAG: SchemaTag = SchemaTag::CriticDecision;

    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let verdict: Verdict = root.field("verdict")?.enumeration()?;
        let rationale = root.field("rationale")?.nonempty_string()?;
        let op_node = root.field("ops")?.field("question")?;
        let action_node = op_node.field("action")?;
        let action: QuestionAction = action_node.enumeration()?;
        let text_node = op_node.opt_field("text")?;
        let text = match (action, text_node) {
            (QuestionAction::Add | QuestionAction::Replace, None) => {
                return Err(SchemaViolation::new(
                    op_node.child_path("text"),
                    format!("required for action {action}"),
                ));
            }
            (QuestionAction::Add | QuestionAction::Replace, Some(node)) => {
                let t = node.nonempty_string()?;
                if !text::is_single_question(&t) {
                    return node.fail("must be a single sentence ending with a question mark");
                }
                Some(t)
            }
            (QuestionAction::Keep | QuestionAction::Remove, Some(node)) => {
                // An empty string is tolerated as "absent".
                if node.string().map(|s| s.trim().is_empty()).unwrap_or(false) {
                    None
                } else {
                    return node.fail(format!("must be absent for action {action}"));
                }
            }
            (QuestionAction::Keep | QuestionAction::Remove, None) => None,
        };
        if verdict == Verdict::Ok && action != QuestionAction::Keep {
            return action_node.fail("verdict ok requires action keep");
        }
        let slot = match op_node.opt_field("slot")? {
            None => None,
            Some(node) => Some(node.enumeration::<SlotId>()?),
        };
        let why = match op_node.opt_field("why")? {
            None => Vec::new(),
            Some(node) => node.string_list()?,
        };
        Ok(CriticDecision {
            verdict,
            rationale,
            ops: RevisionOps {
                question: QuestionOp {
                    action,
                    text,
                    slot,
                    why,
                },
            },
        })
    }
}

impl Schema for String {
    const TAG: SchemaTag = SchemaTag::Text;

    /// Plain-text outputs arrive as a JSON string (or `{"response": ...}`).
    fn from_document(doc: &Value, _ctx: &ValidationContext<'_>) -> Result<Self, SchemaViolation> {
        let root = Node::root(doc);
        let node = match doc {
            Value::Object(_) => root.field("response")?,
            _ => root,
        };
        Ok(node.nonempty_string()?.trim().to_string())
    }
}
