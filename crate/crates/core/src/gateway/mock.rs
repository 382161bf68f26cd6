//! Deterministic rule-table backend.
//!
//! The mock reads the structured template variables of a request (not the
//! rendered prompt) and answers from a JSON rule table: first-match canned
//! replies, then per-kind generators driven by lexicons and sentence templates.
//! It performs no I/O after loading and falls back to a schema-valid neutral
//! reply whenever the variables it needs are absent.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{Backend, BackendError, BackendRequest, PromptKind};
use crate::domain::*;
use crate::memory::SlotCueLexicon;
use crate::text;

const BUILTIN_RULES: &str = include_str!("../../assets/mock_rules.json");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid mock rule table: {0}")]
pub struct RuleTableInvalid(pub String);

#[derive(Debug, Clone, Deserialize)]
struct Lang<T> {
    en: T,
    ko: T,
}

impl<T> Lang<T> {
    fn pick(&self, language: &str) -> &T {
        if language.starts_with("ko") {
            &self.ko
        } else {
            &self.en
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CannedRule {
    kind: PromptKind,
    var: String,
    contains_any: Vec<String>,
    response: Value,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRuleDoc {
    pattern: String,
    event: String,
    context: String,
    impact: ImpactLevel,
    trigger: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmotionRuleDoc {
    pattern: String,
    emotion: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternTemplateDoc {
    pattern: String,
    template: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntentRule {
    contains_any: Vec<String>,
    intent: IntentLabel,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TomRulesDoc {
    belief_template: String,
    max_beliefs: usize,
    desires: Vec<PatternTemplateDoc>,
    intents: Vec<IntentRule>,
    intentions: BTreeMap<IntentLabel, String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryRules {
    presenting: Lang<String>,
    precipitating: Lang<String>,
    opening: Lang<String>,
    max_emotions: usize,
    max_themes: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRule {
    name: String,
    contains_any: Vec<String>,
    primary: MiLabel,
    secondary: MiLabel,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRules {
    rules: Vec<LabelRule>,
    default_primary: MiLabel,
    default_secondary: MiLabel,
    fallback_order: Vec<MiLabel>,
    rationale: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActRule {
    goal: String,
    focus: Vec<FocusTag>,
    key_points: Vec<String>,
    style_hints: Vec<String>,
    draft: Lang<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionRule {
    intent: String,
    why: String,
    templates: Lang<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriticRules {
    add_threshold: f64,
    ok_rationale: String,
    add_rationale: String,
    replace_rationale: String,
    remove_rationale: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    canned: Vec<CannedRule>,
    cognitive_errors: BTreeMap<CognitiveError, Vec<String>>,
    slot_patterns: BTreeMap<SlotId, Vec<String>>,
    #[serde(default)]
    slot_cues: Option<SlotMap<Vec<String>>>,
    inferred_text: Lang<String>,
    max_evidence: usize,
    stopwords: Vec<String>,
    /// Trailing Korean particles stripped from keyword candidates.
    particles: Vec<String>,
    /// Korean predicate endings; tokens ending in one are not keywords.
    predicate_endings: Vec<String>,
    /// English suffixes marking non-topic words, unless listed in `keep_words`.
    drop_suffixes: Vec<String>,
    keep_words: Vec<String>,
    /// Nouns that make good conversation topics; they rank ahead of other
    /// keywords.
    #[serde(default)]
    topic_words: Vec<String>,
    max_keywords: usize,
    events: Vec<EventRuleDoc>,
    emotions: Vec<EmotionRuleDoc>,
    tom: TomRulesDoc,
    summary: SummaryRules,
    labels: LabelRules,
    acts: BTreeMap<MiLabel, ActRule>,
    questions: BTreeMap<SlotId, QuestionRule>,
    critic: CriticRules,
    baseline: Lang<Vec<String>>,
    fallback_topic: Lang<String>,
    fallback_emotion: Lang<String>,
    neutral_text: String,
}

struct EventRule {
    pattern: Regex,
    doc: EventRuleDoc,
}

struct EmotionRule {
    pattern: Regex,
    emotion: String,
}

/// A loaded, compiled rule table.
pub struct MockRules {
    doc: RuleDoc,
    slot_patterns: SlotMap<Vec<Regex>>,
    slot_cues: SlotCueLexicon,
    events: Vec<EventRule>,
    emotions: Vec<EmotionRule>,
    desires: Vec<(Regex, String)>,
    stopwords: BTreeSet<String>,
}

fn compile(pattern: &str) -> Result<Regex, RuleTableInvalid> {
    Regex::new(pattern).map_err(|e| RuleTableInvalid(format!("bad pattern `{pattern}`: {e}")))
}

impl MockRules {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_RULES).expect("shipped mock rule table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, RuleTableInvalid> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RuleTableInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, RuleTableInvalid> {
        let doc: RuleDoc =
            serde_json::from_str(text).map_err(|e| RuleTableInvalid(e.to_string()))?;
        for category in CognitiveError::ALL {
            if doc.cognitive_errors.get(category).is_none_or(Vec::is_empty) {
                return Err(RuleTableInvalid(format!("no triggers for {category}")));
            }
        }
        for label in MiLabel::ALL {
            let act = doc
                .acts
                .get(label)
                .ok_or_else(|| RuleTableInvalid(format!("no act rule for {label}")))?;
            if act.draft.en.is_empty() || act.draft.ko.is_empty() {
                return Err(RuleTableInvalid(format!(
                    "act {label} has no draft sentences"
                )));
            }
        }
        for slot in SlotId::ALL {
            let q = doc
                .questions
                .get(slot)
                .ok_or_else(|| RuleTableInvalid(format!("no question rule for {slot}")))?;
            if q.templates.en.is_empty() || q.templates.ko.is_empty() {
                return Err(RuleTableInvalid(format!(
                    "slot {slot} has no question templates"
                )));
            }
            for t in q.templates.en.iter().chain(&q.templates.ko) {
                if !text::is_single_question(t) {
                    return Err(RuleTableInvalid(format!(
                        "question template `{t}` is not one question"
                    )));
                }
            }
        }
        if doc.baseline.en.is_empty() || doc.baseline.ko.is_empty() {
            return Err(RuleTableInvalid("baseline has no sentences".into()));
        }
        if !(0.0..=1.0).contains(&doc.critic.add_threshold) {
            return Err(RuleTableInvalid(
                "critic.add_threshold must lie in [0, 1]".into(),
            ));
        }
        for label in IntentLabel::ALL {
            if !doc.tom.intentions.contains_key(label) {
                return Err(RuleTableInvalid(format!("no intention phrase for {label}")));
            }
        }

        let mut slot_patterns = SlotMap::<Vec<Regex>>::default();
        for (slot, patterns) in &doc.slot_patterns {
            slot_patterns[*slot] = patterns
                .iter()
                .map(|p| compile(p))
                .collect::<Result<_, _>>()?;
        }
        let events = doc
            .events
            .iter()
            .map(|e| {
                Ok(EventRule {
                    pattern: compile(&e.pattern)?,
                    doc: e.clone(),
                })
            })
            .collect::<Result<_, RuleTableInvalid>>()?;
        let emotions = doc
            .emotions
            .iter()
            .map(|e| {
                Ok(EmotionRule {
                    pattern: compile(&e.pattern)?,
                    emotion: e.emotion.clone(),
                })
            })
            .collect::<Result<_, RuleTableInvalid>>()?;
        let desires = doc
            .tom
            .desires
            .iter()
            .map(|d| Ok((compile(&d.pattern)?, d.template.clone())))
            .collect::<Result<_, RuleTableInvalid>>()?;
        let slot_cues = match &doc.slot_cues {
            Some(cues) => SlotCueLexicon::new(cues.clone()),
            None => SlotCueLexicon::builtin(),
        };
        let stopwords = doc.stopwords.iter().map(|w| w.to_lowercase()).collect();
        Ok(Self {
            doc,
            slot_patterns,
            slot_cues,
            events,
            emotions,
            desires,
            stopwords,
        })
    }

    /// Threshold above which the critic asks for a question on a question-free draft.
    pub fn critic_add_threshold(&self) -> f64 {
        self.doc.critic.add_threshold
    }
}

/// The mock backend. Pure, total and deterministic.
#[derive(Clone)]
pub struct MockBackend {
    rules: Arc<MockRules>,
}

impl MockBackend {
    pub fn new(rules: MockRules) -> Self {
        Self {
            rules: Arc::new(rules),
        }
    }

    /// Shares one compiled copy of the shipped rule table per process.
    pub fn builtin() -> Self {
        static BUILTIN: OnceLock<Arc<MockRules>> = OnceLock::new();
        Self {
            rules: BUILTIN
                .get_or_init(|| Arc::new(MockRules::builtin()))
                .clone(),
        }
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }

    /// Computes the reply for `kind` from template variables.
    pub fn respond(&self, kind: PromptKind, vars: &Map<String, Value>) -> String {
        if let Some(reply) = self.canned(kind, vars) {
            return reply;
        }
        let v = Vars(vars);
        let generated = match kind {
            PromptKind::CognitiveError => self.cognitive_errors(&v),
            PromptKind::PppppiAlign => self.align(&v),
            PromptKind::Tom => self.tom(&v),
            PromptKind::TurnHistory => self.turn_record(&v),
            PromptKind::PppppiUpdate => self.pppppi_update(&v),
            PromptKind::SummaryUpdate => self.summary_update(&v),
            PromptKind::LabelRound1 => self.label_round1(&v),
            PromptKind::LabelRound2 => self.label_round2(&v),
            PromptKind::StrategyGen => self.strategy(&v),
            PromptKind::QuestionIdeation => self.ideation(&v),
            PromptKind::Draft => self.draft(&v).map(Value::String),
            PromptKind::Critic => self.critic(&v),
            PromptKind::BaselineCounselor => self.baseline(&v).map(Value::String),
        };
        let value = generated.unwrap_or_else(|| self.neutral(kind, &v));
        match value {
            Value::String(s) => s,
            other => other.to_string(),
        }
    }

    fn canned(&self, kind: PromptKind, vars: &Map<String, Value>) -> Option<String> {
        let rule = self.rules.doc.canned.iter().find(|rule| {
            rule.kind == kind
                && vars.get(&rule.var).is_some_and(|value| {
                    let hay = value_text(value);
                    rule.contains_any
                        .iter()
                        .any(|needle| text::find_ascii_case_insensitive(&hay, needle).is_some())
                })
        })?;
        Some(match substitute_value(&rule.response, vars) {
            Value::String(s) => s,
            other => other.to_string(),
        })
    }

    fn neutral(&self, kind: PromptKind, v: &Vars<'_>) -> Value {
        let empty_spans = || serde_json::to_value(PppppiSpans::default()).expect("plain data");
        match kind {
            PromptKind::CognitiveError => serde_json::to_value(
                CognitiveError::ALL
                    .iter()
                    .map(|c| CognitiveErrorFlag::absent(*c))
                    .collect::<Vec<_>>(),
            )
            .expect("plain data"),
            PromptKind::PppppiAlign => empty_spans(),
            PromptKind::Tom => serde_json::to_value(TomState::neutral()).expect("plain data"),
            PromptKind::TurnHistory => json!({
                "summary": "The client shared a message.",
                "keywords": [], "events": [], "emotions": []
            }),
            PromptKind::PppppiUpdate => v
                .get::<PppppiAnalysis>("analysis")
                .map(|a| {
                    serde_json::to_value(a.map(|_, e| e.with_changed(false))).expect("plain data")
                })
                .unwrap_or_else(|| {
                    serde_json::to_value(PppppiAnalysis::default()).expect("plain data")
                }),
            PromptKind::SummaryUpdate => json!({
                "core_narrative": self.rules.doc.summary.opening.pick(language_of(&v.get::<String>("utterance").unwrap_or_default())),
                "core_emotion": [], "recurring_themes": []
            }),
            PromptKind::LabelRound1 | PromptKind::LabelRound2 => {
                let excluded: Vec<MiLabel> = v.get("excluded_labels").unwrap_or_default();
                let label = self.first_allowed(MiLabel::General, &excluded);
                json!({"label": label, "rationale": self.rationale(label)})
            }
            PromptKind::StrategyGen => self.plan_value(&[MiLabel::General]),
            PromptKind::QuestionIdeation => json!({"candidates": []}),
            PromptKind::Critic => json!({
                "verdict": "ok", "rationale": self.rules.doc.critic.ok_rationale,
                "ops": {"question": {"action": "keep", "why": []}}
            }),
            PromptKind::Draft | PromptKind::BaselineCounselor => {
                Value::String(self.rules.doc.neutral_text.clone())
            }
        }
    }

    fn cognitive_errors(&self, v: &Vars<'_>) -> Option<Value> {
        let utterance: String = v.get("utterance")?;
        let flags: Vec<CognitiveErrorFlag> = CognitiveError::ALL
            .iter()
            .map(|category| {
                let mut spans = Vec::new();
                for trigger in &self.rules.doc.cognitive_errors[category] {
                    if let Some((s, e)) = text::find_ascii_case_insensitive(&utterance, trigger) {
                        push_unique(&mut spans, utterance[s..e].to_string());
                    }
                }
                CognitiveErrorFlag {
                    name: *category,
                    present: !spans.is_empty(),
                    spans,
                }
            })
            .collect();
        serde_json::to_value(flags).ok()
    }

    fn align(&self, v: &Vars<'_>) -> Option<Value> {
        let utterance: String = v.get("utterance")?;
        let flags: Vec<CognitiveErrorFlag> = v.get("flags").unwrap_or_default();
        let mut spans = PppppiSpans::default();
        for (slot, patterns) in self.rules.slot_patterns.iter() {
            for pattern in patterns {
                for m in pattern.find_iter(&utterance) {
                    let span = m.as_str().trim();
                    if !span.is_empty() {
                        push_unique(&mut spans[slot], span.to_string());
                    }
                }
            }
        }
        for flag in flags.iter().filter(|f| f.present) {
            for span in &flag.spans {
                if utterance.contains(span.as_str()) {
                    push_unique(&mut spans[SlotId::Perpetuating], span.clone());
                }
            }
        }
        serde_json::to_value(spans).ok()
    }

    fn tom(&self, v: &Vars<'_>) -> Option<Value> {
        let turns: Vec<DialogueTurn> = v.get("recent_turns")?;
        let utterance = turns
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::User)?
            .text
            .clone();
        let spans: PppppiSpans = v.get("spans").unwrap_or_default();
        let rules = &self.rules.doc.tom;
        let mut beliefs = Vec::new();
        for span in spans[SlotId::Presenting]
            .iter()
            .chain(&spans[SlotId::Perpetuating])
        {
            if beliefs.len() < rules.max_beliefs {
                push_unique(&mut beliefs, rules.belief_template.replace("{span}", span));
            }
        }
        let mut desires = Vec::new();
        for (pattern, template) in &self.rules.desires {
            for caps in pattern.captures_iter(&utterance) {
                let mut out = String::new();
                caps.expand(template, &mut out);
                push_unique(&mut desires, out.trim().to_string());
            }
        }
        let intent = rules
            .intents
            .iter()
            .find(|r| contains_any(&utterance, &r.contains_any))
            .map_or(IntentLabel::Engaging, |r| r.intent);
        let tom = TomState {
            beliefs,
            desires,
            intentions: vec![rules.intentions[&intent].clone()],
            intent_label: intent,
        };
        serde_json::to_value(tom).ok()
    }

    /// Lowercases a token and reduces it to a keyword candidate, or `None`
    /// when it is a function word or predicate.
    fn keyword_candidate(&self, token: &str) -> Option<String> {
        let doc = &self.rules.doc;
        let lower = token.to_lowercase();
        if self.rules.stopwords.contains(&lower) {
            return None;
        }
        if lower.is_ascii() {
            let dropped = doc
                .drop_suffixes
                .iter()
                .any(|sfx| lower.len() > sfx.len() + 2 && lower.ends_with(sfx.as_str()));
            return (lower.len() >= 3 && (!dropped || doc.keep_words.contains(&lower)))
                .then_some(lower);
        }
        if doc
            .predicate_endings
            .iter()
            .any(|e| lower.ends_with(e.as_str()))
        {
            return None;
        }
        let stem = doc
            .particles
            .iter()
            .filter(|p| lower.ends_with(p.as_str()) && lower.chars().count() > p.chars().count())
            .max_by_key(|p| p.len())
            .map_or(lower.as_str(), |p| &lower[..lower.len() - p.len()]);
        (!stem.is_empty() && !self.rules.stopwords.contains(stem)).then(|| stem.to_string())
    }

    fn keywords(&self, utterance: &str) -> Vec<String> {
        let doc = &self.rules.doc;
        let mut candidates = Vec::new();
        for keyword in utterance
            .split(|c: char| !(c.is_alphanumeric() || c == '\''))
            .filter(|t| !t.is_empty())
            .filter_map(|t| self.keyword_candidate(t))
        {
            push_unique(&mut candidates, keyword);
        }
        let is_topic = |k: &String| doc.topic_words.contains(k);
        let (mut out, rest): (Vec<_>, Vec<_>) = candidates.into_iter().partition(is_topic);
        out.extend(rest);
        out.truncate(doc.max_keywords);
        out
    }

    fn turn_record(&self, v: &Vars<'_>) -> Option<Value> {
        let utterance: String = v.get("utterance")?;
        let keywords = self.keywords(&utterance);
        let mut events = Vec::new();
        let mut triggers = Vec::new();
        for rule in &self.rules.events {
            for caps in rule.pattern.captures_iter(&utterance) {
                let expand = |template: &str| {
                    let mut out = String::new();
                    caps.expand(template, &mut out);
                    out.trim().to_string()
                };
                let event = TurnEvent {
                    event: expand(&rule.doc.event),
                    context: expand(&rule.doc.context),
                    impact_level: rule.doc.impact,
                };
                if !events.contains(&event) {
                    events.push(event);
                    triggers.push(expand(&rule.doc.trigger));
                }
            }
        }
        let default_trigger = triggers
            .first()
            .or(keywords.first())
            .cloned()
            .unwrap_or_else(|| "unspecified".to_string());
        let mut emotions: Vec<EmotionTrigger> = Vec::new();
        for rule in &self.rules.emotions {
            if rule.pattern.is_match(&utterance)
                && !emotions.iter().any(|e| e.emotion == rule.emotion)
            {
                emotions.push(EmotionTrigger {
                    emotion: rule.emotion.clone(),
                    trigger: default_trigger.clone(),
                });
            }
        }
        let summary = match keywords.as_slice() {
            [] => "The client shared a brief message.".to_string(),
            [one] => format!("The client talked about {one}."),
            many => {
                let shown = &many[..many.len().min(3)];
                let (last, rest) = shown.split_last().expect("non-empty");
                format!("The client talked about {} and {last}.", rest.join(", "))
            }
        };
        Some(
            json!({"summary": summary, "keywords": keywords, "events": events, "emotions": emotions}),
        )
    }

    fn pppppi_update(&self, v: &Vars<'_>) -> Option<Value> {
        let current: PppppiAnalysis = v.get("analysis")?;
        let record: TurnRecord = v.get("record")?;
        let spans: PppppiSpans = v.get("spans").unwrap_or_default();
        let max_evidence = self.rules.doc.max_evidence;
        let next = current.map(|slot, prior| {
            let new_spans = &spans[slot];
            if !new_spans.is_empty() {
                let mut evidence = prior.evidence.clone();
                for span in new_spans {
                    push_unique(&mut evidence, span.clone());
                }
                let overflow = evidence.len().saturating_sub(max_evidence);
                evidence.drain(..overflow);
                let entry = PppppiEntry {
                    text: new_spans.join("; "),
                    evidence,
                    is_inferred: false,
                    changed: false,
                    provenance: prior.provenance.clone(),
                };
                let changed = !entry.same_content(prior);
                return entry.with_changed(changed);
            }
            let cue = record
                .keywords
                .iter()
                .find(|k| self.rules.slot_cues.matches(slot, k));
            match cue {
                Some(keyword) if prior.text.trim().is_empty() => PppppiEntry {
                    text: self
                        .rules
                        .doc
                        .inferred_text
                        .pick(language_of(keyword))
                        .replace("{keyword}", keyword),
                    evidence: vec![keyword.clone()],
                    is_inferred: true,
                    changed: true,
                    provenance: prior.provenance.clone(),
                },
                _ => prior.with_changed(false),
            }
        });
        serde_json::to_value(next).ok()
    }

    fn summary_update(&self, v: &Vars<'_>) -> Option<Value> {
        let prior: SummaryUpdate = v.get("summary").unwrap_or_default();
        let record: TurnRecord = v.get("record")?;
        let analysis: PppppiAnalysis = v.get("analysis")?;
        let utterance: String = v.get("utterance").unwrap_or_default();
        let rules = &self.rules.doc.summary;
        let lang = language_of(&utterance);
        // Only directly evidenced entries make it into the narrative.
        let direct = |slot: SlotId| {
            let entry = &analysis[slot];
            if entry.is_inferred {
                String::new()
            } else {
                clean_fragment(&entry.text)
            }
        };
        let presenting = direct(SlotId::Presenting);
        let precipitating = direct(SlotId::Precipitating);
        let core_narrative = if !presenting.is_empty() {
            let mut s = rules
                .presenting
                .pick(lang)
                .replace("{presenting}", &presenting);
            if !precipitating.is_empty() {
                s.push_str(
                    &rules
                        .precipitating
                        .pick(lang)
                        .replace("{precipitating}", &precipitating),
                );
            }
            s
        } else if !prior.core_narrative.trim().is_empty() {
            prior.core_narrative.clone()
        } else {
            rules.opening.pick(lang).clone()
        };
        let mut core_emotion = Vec::new();
        for e in record
            .emotions
            .iter()
            .map(|e| &e.emotion)
            .chain(&prior.core_emotion)
        {
            if core_emotion.len() < rules.max_emotions {
                push_unique(&mut core_emotion, e.clone());
            }
        }
        let mut recurring_themes = prior.recurring_themes.clone();
        if let Some(theme) = record.keywords.first() {
            if recurring_themes.len() < rules.max_themes {
                push_unique(&mut recurring_themes, theme.clone());
            }
        }
        Some(json!({
            "core_narrative": core_narrative,
            "core_emotion": core_emotion,
            "recurring_themes": recurring_themes,
        }))
    }

    fn label_rule(&self, utterance: &str) -> Option<&LabelRule> {
        self.rules
            .doc
            .labels
            .rules
            .iter()
            .find(|r| contains_any(utterance, &r.contains_any))
            .inspect(|r| tracing::trace!(rule = %r.name, "mock label rule matched"))
    }

    fn rationale(&self, label: MiLabel) -> String {
        self.rules
            .doc
            .labels
            .rationale
            .replace("{label}", label.as_str())
    }

    fn first_allowed(&self, preferred: MiLabel, excluded: &[MiLabel]) -> MiLabel {
        if !excluded.contains(&preferred) {
            return preferred;
        }
        self.rules
            .doc
            .labels
            .fallback_order
            .iter()
            .chain(MiLabel::ALL)
            .copied()
            .find(|l| !excluded.contains(l))
            .unwrap_or(MiLabel::General)
    }

    fn label_round1(&self, v: &Vars<'_>) -> Option<Value> {
        let utterance: String = v.get("utterance")?;
        let label = self
            .label_rule(&utterance)
            .map_or(self.rules.doc.labels.default_primary, |r| r.primary);
        Some(json!({"label": label, "rationale": self.rationale(label)}))
    }

    fn label_round2(&self, v: &Vars<'_>) -> Option<Value> {
        let utterance: String = v.get("utterance")?;
        let excluded: Vec<MiLabel> = v.get("excluded_labels").unwrap_or_default();
        let preferred = self
            .label_rule(&utterance)
            .map_or(self.rules.doc.labels.default_secondary, |r| r.secondary);
        let label = self.first_allowed(preferred, &excluded);
        Some(json!({"label": label, "rationale": self.rationale(label)}))
    }

    fn plan_value(&self, acts: &[MiLabel]) -> Value {
        let goals: Vec<Value> = acts
            .iter()
            .map(|a| json!({"act": a, "goal": self.rules.doc.acts[a].goal}))
            .collect();
        let act_plans: Vec<Value> = acts
            .iter()
            .map(|a| {
                let rule = &self.rules.doc.acts[a];
                json!({
                    "act": a,
                    "focus": rule.focus,
                    "key_points": rule.key_points,
                    "style_hints": rule.style_hints,
                })
            })
            .collect();
        json!({"plan": {"speech_acts": acts, "goals": goals}, "act_plans": act_plans})
    }

    fn strategy(&self, v: &Vars<'_>) -> Option<Value> {
        let primary: LabelPrediction = v.get("primary")?;
        let mut acts = vec![primary.label];
        if let Some(secondary) = v.get::<Option<LabelPrediction>>("secondary").flatten() {
            if secondary.label != primary.label {
                acts.push(secondary.label);
            }
        }
        Some(self.plan_value(&acts))
    }

    fn ideation(&self, v: &Vars<'_>) -> Option<Value> {
        let targets: Vec<SlotScore> = v.get("target_slots")?;
        let keywords: Vec<String> = v.get("keywords").unwrap_or_default();
        let language: String = v.get("language").unwrap_or_default();
        let turn: usize = v.get("turn_index").unwrap_or(0);
        let keyword = keywords
            .first()
            .cloned()
            .unwrap_or_else(|| self.rules.doc.fallback_topic.pick(&language).clone());
        let candidates: Vec<Value> = targets
            .iter()
            .enumerate()
            .map(|(i, target)| {
                let rule = &self.rules.doc.questions[&target.slot];
                let templates = rule.templates.pick(&language);
                let question =
                    templates[(turn + i) % templates.len()].replace("{keyword}", &keyword);
                json!({
                    "slot": target.slot,
                    "intent": rule.intent,
                    "question": question,
                    "why": rule.why,
                    "confidence": (90 - 10 * i.min(8) as i64) as f64 / 100.0,
                })
            })
            .collect();
        Some(json!({ "candidates": candidates }))
    }

    fn draft(&self, v: &Vars<'_>) -> Option<String> {
        let plan: StrategyPlan = v.get("plan")?;
        let candidates: Vec<CandidateQuestion> = v.get("candidates").unwrap_or_default();
        let language: String = v.get("language").unwrap_or_default();
        let turn: usize = v.get("turn_index").unwrap_or(0);
        let records: Vec<TurnRecord> = v.get("recent_records").unwrap_or_default();
        let summary: SummaryUpdate = v.get("summary").unwrap_or_default();
        let latest = records.last();
        let topic = latest
            .and_then(|r| r.keywords.first())
            .or(summary.recurring_themes.last())
            .cloned()
            .unwrap_or_else(|| self.rules.doc.fallback_topic.pick(&language).clone());
        let emotion = latest
            .and_then(|r| r.emotions.first().map(|e| e.emotion.clone()))
            .or_else(|| summary.core_emotion.first().cloned())
            .unwrap_or_else(|| self.rules.doc.fallback_emotion.pick(&language).clone());

        let mut statements = Vec::new();
        let mut questions = Vec::new();
        for act in plan.speech_acts() {
            if *act == MiLabel::OpenQuestion {
                if let Some(c) = candidates.first() {
                    questions.push(c.question.clone());
                    continue;
                }
            }
            let templates = self.rules.doc.acts[act].draft.pick(&language);
            let sentence = templates[turn % templates.len()]
                .replace("{topic}", &topic)
                .replace("{emotion}", &emotion);
            if act.is_question() {
                questions.push(sentence);
            } else {
                statements.push(sentence);
            }
        }
        questions.truncate(1);
        statements.extend(questions);
        Some(text::join_sentences(statements.iter().map(String::as_str)))
    }

    fn critic(&self, v: &Vars<'_>) -> Option<Value> {
        let draft: String = v.get("draft")?;
        let recent: Vec<String> = v.get("recent_agent_turns").unwrap_or_default();
        let ranking: Vec<SlotScore> = v.get("ranking").unwrap_or_default();
        let candidates: Vec<CandidateQuestion> = v.get("candidates").unwrap_or_default();
        let rules = &self.rules.doc.critic;
        let asked: BTreeSet<String> = recent
            .iter()
            .flat_map(|t| text::detect_question_sentences(t))
            .map(|s| s.text)
            .collect();
        let draft_questions = text::detect_question_sentences(&draft);

        if let Some(repeated) = draft_questions.iter().find(|q| asked.contains(&q.text)) {
            let fresh = ranking.iter().find_map(|r| {
                candidates.iter().find(|c| {
                    c.slot == r.slot && c.question != repeated.text && !asked.contains(&c.question)
                })
            });
            return Some(match fresh {
                Some(c) => json!({
                    "verdict": "needs_fix", "rationale": rules.replace_rationale,
                    "ops": {"question": {"action": "replace", "text": c.question, "slot": c.slot, "why": ["redundant"]}}
                }),
                None => json!({
                    "verdict": "needs_fix", "rationale": rules.remove_rationale,
                    "ops": {"question": {"action": "remove", "why": ["redundant"]}}
                }),
            });
        }

        let top = ranking.first();
        if draft_questions.is_empty() && top.is_some_and(|t| t.score >= rules.add_threshold) {
            let top = top.expect("checked above");
            let pick = ranking
                .iter()
                .find_map(|r| candidates.iter().find(|c| c.slot == r.slot));
            let (slot, question) = match pick {
                Some(c) => (c.slot, c.question.clone()),
                None => {
                    let language: String = v.get("language").unwrap_or_default();
                    let topic = self.rules.doc.fallback_topic.pick(&language);
                    let templates = self.rules.doc.questions[&top.slot]
                        .templates
                        .pick(&language);
                    (top.slot, templates[0].replace("{keyword}", topic))
                }
            };
            return Some(json!({
                "verdict": "needs_fix", "rationale": rules.add_rationale,
                "ops": {"question": {"action": "add", "text": question, "slot": slot, "why": ["missing_question", "high_gap"]}}
            }));
        }

        Some(json!({
            "verdict": "ok", "rationale": rules.ok_rationale,
            "ops": {"question": {"action": "keep", "why": []}}
        }))
    }

    fn baseline(&self, v: &Vars<'_>) -> Option<String> {
        let _: String = v.get("utterance")?;
        let language: String = v.get("language").unwrap_or_default();
        let turn: usize = v.get("turn_index").unwrap_or(0);
        let emotion: String = v
            .get::<String>("emotion")
            .filter(|e| !e.trim().is_empty())
            .unwrap_or_else(|| self.rules.doc.fallback_emotion.pick(&language).clone());
        let templates = self.rules.doc.baseline.pick(&language);
        Some(templates[turn % templates.len()].replace("{emotion}", emotion.trim()))
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        Ok(self.respond(request.kind, request.vars))
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct SlotScore {
    slot: SlotId,
    score: f64,
}

struct Vars<'a>(&'a Map<String, Value>);

impl Vars<'_> {
    fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        self.0.get(key).and_then(|v| T::deserialize(v).ok())
    }
}

fn value_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn substitute_value(template: &Value, vars: &Map<String, Value>) -> Value {
    match template {
        Value::String(s) => {
            let mut out = s.clone();
            for (key, value) in vars {
                let needle = format!("{{{{{key}}}}}");
                if out.contains(&needle) {
                    out = out.replace(&needle, &value_text(value));
                }
            }
            Value::String(out)
        }
        Value::Array(items) => {
            Value::Array(items.iter().map(|i| substitute_value(i, vars)).collect())
        }
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), substitute_value(v, vars)))
                .collect(),
        ),
        other => other.clone(),
    }
}

fn contains_any(haystack: &str, needles: &[String]) -> bool {
    needles
        .iter()
        .any(|n| text::find_ascii_case_insensitive(haystack, n).is_some())
}

fn push_unique(list: &mut Vec<String>, item: String) {
    if !list.contains(&item) {
        list.push(item);
    }
}

/// `"ko"` when the text contains Hangul, `"en"` otherwise.
fn language_of(text: &str) -> &'static str {
    if text
        .chars()
        .any(|c| ('\u{AC00}'..='\u{D7A3}').contains(&c) || ('\u{3131}'..='\u{318E}').contains(&c))
    {
        "ko"
    } else {
        "en"
    }
}

fn clean_fragment(text: &str) -> String {
    text.chars()
        .filter(|c| !matches!(c, '.' | '!' | '?' | '。' | '？'))
        .collect::<String>()
        .trim()
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vars(pairs: &[(&str, Value)]) -> Map<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn flags_for(utterance: &str) -> Vec<CognitiveErrorFlag> {
        let reply = MockBackend::builtin().respond(
            PromptKind::CognitiveError,
            &vars(&[("utterance", json!(utterance))]),
        );
        serde_json::from_str(&reply).unwrap()
    }

    fn present(flags: &[CognitiveErrorFlag], c: CognitiveError) -> Option<Vec<String>> {
        flags
            .iter()
            .find(|f| f.name == c && f.present)
            .map(|f| f.spans.clone())
    }

    #[test]
    fn trigger_lexicon() {
        let f = flags_for("I always mess this up, it's my fault");
        assert_eq!(
            present(&f, CognitiveError::Overgeneralization),
            Some(vec!["always".into()])
        );
        assert_eq!(
            present(&f, CognitiveError::Personalization),
            Some(vec!["my fault".into()])
        );
        assert!(present(
            &flags_for("I must finish it"),
            CognitiveError::SelectiveAbstraction
        )
        .is_some());
        assert!(present(
            &flags_for("It's a disaster"),
            CognitiveError::Catastrophizing
        )
        .is_some());
        let neutral = flags_for("I went for a walk");
        assert_eq!(neutral.len(), 4);
        assert!(neutral.iter().all(|f| !f.present && f.spans.is_empty()));
    }

    #[test]
    fn alignment_examples() {
        let m = MockBackend::builtin();
        let u = "Since yesterday's argument I can't sleep";
        let reply = m.respond(
            PromptKind::PppppiAlign,
            &vars(&[("utterance", json!(u)), ("flags", json!([]))]),
        );
        let spans: PppppiSpans = serde_json::from_str(&reply).unwrap();
        assert_eq!(
            spans[SlotId::Precipitating],
            vec!["yesterday's argument".to_string()]
        );
        assert_eq!(spans[SlotId::Impact], vec!["can't sleep".to_string()]);

        let reply = m.respond(
            PromptKind::PppppiAlign,
            &vars(&[
                ("utterance", json!("I went for a walk")),
                ("flags", json!([])),
            ]),
        );
        let spans: PppppiSpans = serde_json::from_str(&reply).unwrap();
        assert!(spans.is_all_empty());
    }

    #[test]
    fn flagged_spans_feed_perpetuating() {
        let u = "I always fail";
        let flags = flags_for(u);
        let reply = MockBackend::builtin().respond(
            PromptKind::PppppiAlign,
            &vars(&[
                ("utterance", json!(u)),
                ("flags", serde_json::to_value(&flags).unwrap()),
            ]),
        );
        let spans: PppppiSpans = serde_json::from_str(&reply).unwrap();
        assert!(spans[SlotId::Perpetuating].contains(&"always".to_string()));
    }

    #[test]
    fn turn_record_example() {
        let reply = MockBackend::builtin().respond(
            PromptKind::TurnHistory,
            &vars(&[("utterance", json!("I failed the exam and feel ashamed"))]),
        );
        let record: TurnRecord = serde_json::from_str(&reply).unwrap();
        assert_eq!(record.events[0].event, "failed exam");
        assert_eq!(record.events[0].impact_level, ImpactLevel::High);
        assert_eq!(record.emotions[0].emotion, "shame");
        assert_eq!(record.emotions[0].trigger, "exam failure");
        assert!(!record.keywords.is_empty());
    }

    #[test]
    fn distress_disclosure_labels() {
        let m = MockBackend::builtin();
        let u = json!("I'm so anxious about work lately");
        let first: LabelPrediction = serde_json::from_str(
            &m.respond(PromptKind::LabelRound1, &vars(&[("utterance", u.clone())])),
        )
        .unwrap();
        assert_eq!(first.label, MiLabel::ComplexReflection);
        let second: LabelPrediction = serde_json::from_str(&m.respond(
            PromptKind::LabelRound2,
            &vars(&[
                ("utterance", u),
                (
                    "excluded_labels",
                    json!(["SimpleReflection", "ComplexReflection"]),
                ),
            ]),
        ))
        .unwrap();
        assert_eq!(second.label, MiLabel::OpenQuestion);
    }

    #[test]
    fn career_anxiety_is_engaging() {
        let turns = json!([{"speaker": "user", "text": "I'm anxious about my career because my friends are all ahead of me"}]);
        let reply =
            MockBackend::builtin().respond(PromptKind::Tom, &vars(&[("recent_turns", turns)]));
        let tom: TomState = serde_json::from_str(&reply).unwrap();
        assert_eq!(tom.intent_label, IntentLabel::Engaging);
    }

    #[test]
    fn neutral_fallbacks_validate() {
        let m = MockBackend::builtin();
        let empty = Map::new();
        for kind in PromptKind::ALL {
            let reply = m.respond(*kind, &empty);
            let doc = crate::gateway::parse_document(&reply, kind.schema()).unwrap();
            crate::schema::validate(&doc, kind.schema(), &Default::default())
                .unwrap_or_else(|e| panic!("{kind}: {e}"));
        }
    }

    #[test]
    fn invalid_tables_are_rejected() {
        assert!(MockRules::from_json("{}").is_err());
        let mut doc: Value = serde_json::from_str(BUILTIN_RULES).unwrap();
        doc["slot_patterns"]["impact"] = json!(["(unclosed"]);
        assert!(MockRules::from_json(&doc.to_string()).is_err());
        let mut doc: Value = serde_json::from_str(BUILTIN_RULES).unwrap();
        doc["acts"].as_object_mut().unwrap().remove("Advise");
        assert!(MockRules::from_json(&doc.to_string()).is_err());
    }

    #[test]
    fn canned_rules_take_precedence() {
        let mut doc: Value = serde_json::from_str(BUILTIN_RULES).unwrap();
        doc["canned"] = json!([{
            "kind": "baseline_counselor", "var": "utterance", "contains_any": ["hello"],
            "response": "Hi {{concern}}."
        }]);
        let m = MockBackend::new(MockRules::from_json(&doc.to_string()).unwrap());
        let reply = m.respond(
            PromptKind::BaselineCounselor,
            &vars(&[
                ("utterance", json!("Hello there")),
                ("concern", json!("work")),
            ]),
        );
        assert_eq!(reply, "Hi work.");
    }

    proptest! {
        #[test]
        fn deterministic_for_identical_inputs(utterance in "[a-zA-Z '가-힣]{0,40}", kind_idx in 0usize..13) {
            let m = MockBackend::builtin();
            let kind = PromptKind::ALL[kind_idx];
            let v = vars(&[("utterance", json!(utterance)), ("turn_index", json!(1))]);
            prop_assert_eq!(m.respond(kind, &v), m.respond(kind, &v));
        }

        #[test]
        fn cognitive_spans_are_grounded(utterance in "(I |always |must |my fault |never |ruined |disaster |ok )*") {
            for flag in flags_for(&utterance) {
                prop_assert_eq!(flag.present, !flag.spans.is_empty());
                for span in &flag.spans {
                    prop_assert!(utterance.contains(span.as_str()));
                }
            }
        }
    }
}
