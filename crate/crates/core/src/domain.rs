//! Shared domain types for every pipeline stage.
//!
//! All types are plain values (`Clone + Send + Sync`). The JSON encoding of
//! these types is the wire and persistence format used by the gateway, the
//! session transcripts and the HTTP service.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Error returned when a string is not one of an enumeration's wire names.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {enum_name} variant `{value}` (expected one of: {expected})")]
pub struct UnknownVariant {
    pub enum_name: &'static str,
    pub value: String,
    pub expected: String,
}

wire_enum! {
    /// PPPPPI formulation slot. Declaration order is the canonical order used
    /// for every tie-break in the system.
    pub enum SlotId {
        Presenting => "presenting",
        Precipitating => "precipitating",
        Perpetuating => "perpetuating",
        Predisposing => "predisposing",
        Protective => "protective",
        Impact => "impact",
    }
}

impl SlotId {
    pub fn position(self) -> usize {
        self as usize
    }
}

/// The six slots in canonical order.
pub fn canonical_slot_order() -> [SlotId; 6] {
    [
        SlotId::Presenting,
        SlotId::Precipitating,
        SlotId::Perpetuating,
        SlotId::Predisposing,
        SlotId::Protective,
        SlotId::Impact,
    ]
}

wire_enum! {
    /// Cognitive error category detectable from explicit lexical cues.
    pub enum CognitiveError {
        Catastrophizing => "Catastrophizing",
        Overgeneralization => "Overgeneralization",
        Personalization => "Personalization",
        SelectiveAbstraction => "SelectiveAbstraction",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CognitiveErrorFlag {
    pub name: CognitiveError,
    pub present: bool,
    pub spans: Vec<String>,
}

impl CognitiveErrorFlag {
    pub fn absent(name: CognitiveError) -> Self {
        Self {
            name,
            present: false,
            spans: Vec::new(),
        }
    }
}

/// A total map from [`SlotId`] to `T`, serialized as a JSON object with all
/// six slot keys in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SlotMap<T> {
    values: [T; 6],
}

impl<T> SlotMap<T> {
    pub fn from_fn(mut f: impl FnMut(SlotId) -> T) -> Self {
        Self {
            values: canonical_slot_order().map(&mut f),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (SlotId, &T)> {
        canonical_slot_order().into_iter().zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (SlotId, &mut T)> {
        canonical_slot_order()
            .into_iter()
            .zip(self.values.iter_mut())
    }

    pub fn map<U>(&self, mut f: impl FnMut(SlotId, &T) -> U) -> SlotMap<U> {
        SlotMap::from_fn(|slot| f(slot, &self[slot]))
    }
}

impl<T> Index<SlotId> for SlotMap<T> {
    type Output = T;
    fn index(&self, slot: SlotId) -> &T {
        &self.values[slot.position()]
    }
}

impl<T> IndexMut<SlotId> for SlotMap<T> {
    fn index_mut(&mut self, slot: SlotId) -> &mut T {
        &mut self.values[slot.position()]
    }
}

impl<T: Serialize> Serialize for SlotMap<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(6))?;
        for (slot, value) in self.iter() {
            map.serialize_entry(slot.as_str(), value)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for SlotMap<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct SlotMapVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Deserialize<'de>> Visitor<'de> for SlotMapVisitor<T> {
            type Value = SlotMap<T>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object with all six PPPPPI slot keys")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut slots: [Option<T>; 6] = Default::default();
                while let Some(key) = access.next_key::<String>()? {
                    let slot: SlotId = key.parse().map_err(de::Error::custom)?;
                    if slots[slot.position()].is_some() {
                        return Err(de::Error::custom(format!("duplicate slot `{key}`")));
                    }
                    slots[slot.position()] = Some(access.next_value()?);
                }
                let mut out = Vec::with_capacity(6);
                for (slot, value) in canonical_slot_order().into_iter().zip(slots) {
                    out.push(value.ok_or_else(|| de::Error::missing_field(slot.as_str()))?);
                }
                let values: [T; 6] = out
                    .try_into()
                    .map_err(|_| de::Error::custom("slot map must have six entries"))?;
                Ok(SlotMap { values })
            }
        }

        d.deserialize_map(SlotMapVisitor(std::marker::PhantomData))
    }
}

/// Evidence spans per slot, as returned by PPPPPI alignment. An empty list
/// means no textual evidence.
pub type PppppiSpans = SlotMap<Vec<String>>;

impl PppppiSpans {
    pub fn is_all_empty(&self) -> bool {
        self.iter().all(|(_, spans)| spans.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PppppiEntry {
    pub text: String,
    pub evidence: Vec<String>,
    pub is_inferred: bool,
    pub changed: bool,
    /// User-turn indices that supported this entry, in the order changes happened.
    #[serde(default)]
    pub provenance: Vec<u32>,
}

impl PppppiEntry {
    pub fn with_changed(&self, changed: bool) -> Self {
        Self {
            changed,
            ..self.clone()
        }
    }

    /// Content equality used for the `changed` flag: text and evidence only.
    pub fn same_content(&self, other: &PppppiEntry) -> bool {
        self.text == other.text && self.evidence == other.evidence
    }
}

/// The six-slot clinical formulation.
pub type PppppiAnalysis = SlotMap<PppppiEntry>;

wire_enum! {
    /// The four Motivational Interviewing processes, used as the ToM intent label.
    pub enum IntentLabel {
        Engaging => "Engaging",
        Focusing => "Focusing",
        Evoking => "Evoking",
        Planning => "Planning",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TomState {
    pub beliefs: Vec<String>,
    pub desires: Vec<String>,
    pub intentions: Vec<String>,
    pub intent_label: IntentLabel,
}

impl TomState {
    /// Empty lists with `Engaging`; stands in when the state builder is ablated.
    pub fn neutral() -> Self {
        Self {
            beliefs: Vec::new(),
            desires: Vec::new(),
            intentions: Vec::new(),
            intent_label: IntentLabel::Engaging,
        }
    }
}

wire_enum! {
    pub enum ImpactLevel {
        High => "high",
        Medium => "medium",
        Low => "low",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub event: String,
    pub context: String,
    pub impact_level: ImpactLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionTrigger {
    pub emotion: String,
    pub trigger: String,
}

/// Lightweight per-turn memory record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub summary: String,
    pub keywords: Vec<String>,
    pub events: Vec<TurnEvent>,
    pub emotions: Vec<EmotionTrigger>,
}

/// Narrative fields produced by the summary update stage.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SummaryUpdate {
    pub core_narrative: String,
    pub core_emotion: Vec<String>,
    pub recurring_themes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverallSummary {
    pub core_narrative: String,
    pub core_emotion: Vec<String>,
    pub recurring_themes: Vec<String>,
    pub analysis: PppppiAnalysis,
}

wire_enum! {
    /// MI behavioral code used to plan the next counselor turn.
    pub enum MiLabel {
        SimpleReflection => "SimpleReflection",
        ComplexReflection => "ComplexReflection",
        OpenQuestion => "OpenQuestion",
        ClosedQuestion => "ClosedQuestion",
        Affirm => "Affirm",
        GiveInformation => "GiveInformation",
        Advise => "Advise",
        General => "General",
    }
}

impl MiLabel {
    pub fn is_question(self) -> bool {
        matches!(self, MiLabel::OpenQuestion | MiLabel::ClosedQuestion)
    }

    pub fn is_reflection(self) -> bool {
        matches!(self, MiLabel::SimpleReflection | MiLabel::ComplexReflection)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub label: MiLabel,
    pub rationale: String,
}

wire_enum! {
    /// Realization focus of an act plan.
    pub enum FocusTag {
        BasicRestatement => "basic_restatement",
        ExpandedRestatement => "expanded_restatement",
        EmotionReflection => "emotion_reflection",
        MeaningExpansion => "meaning_expansion",
        OpenProbing => "open_probing",
        FactChecking => "fact_checking",
        SelfEfficacySupport => "self_efficacy_support",
        InformationGiving => "information_giving",
        Advising => "advising",
        Bridging => "bridging",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActGoal {
    pub act: MiLabel,
    pub goal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechActPlan {
    /// Primary act first, optional secondary act second.
    pub speech_acts: Vec<MiLabel>,
    pub goals: Vec<ActGoal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActPlan {
    pub act: MiLabel,
    pub focus: Vec<FocusTag>,
    pub key_points: Vec<String>,
    pub style_hints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub plan: SpeechActPlan,
    pub act_plans: Vec<ActPlan>,
}

impl StrategyPlan {
    pub fn speech_acts(&self) -> &[MiLabel] {
        &self.plan.speech_acts
    }

    pub fn primary(&self) -> MiLabel {
        self.plan.speech_acts[0]
    }

    pub fn includes(&self, label: MiLabel) -> bool {
        self.plan.speech_acts.contains(&label)
    }

    pub fn act_plan(&self, label: MiLabel) -> Option<&ActPlan> {
        self.act_plans.iter().find(|p| p.act == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateQuestion {
    pub slot: SlotId,
    pub intent: String,
    pub question: String,
    pub why: String,
    pub confidence: f64,
}

wire_enum! {
    pub enum Verdict {
        Ok => "ok",
        NeedsFix => "needs_fix",
    }
}

wire_enum! {
    pub enum QuestionAction {
        Keep => "keep",
        Add => "add",
        Replace => "replace",
        Remove => "remove",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOp {
    pub action: QuestionAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<SlotId>,
    #[serde(default)]
    pub why: Vec<String>,
}

impl QuestionOp {
    pub fn keep() -> Self {
        Self {
            action: QuestionAction::Keep,
            text: None,
            slot: None,
            why: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionOps {
    pub question: QuestionOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticDecision {
    pub verdict: Verdict,
    pub rationale: String,
    pub ops: RevisionOps,
}

impl CriticDecision {
    pub fn question_op(&self) -> &QuestionOp {
        &self.ops.question
    }
}

wire_enum! {
    /// Pipeline variant. `Baseline` is a single prompted counselor call; the
    /// `Wo*` modes disable one module each.
    pub enum SessionMode {
        Baseline => "baseline",
        Full => "full",
        WoSB => "wo_sb",
        WoSP => "wo_sp",
        WoQIC => "wo_qic",
    }
}

wire_enum! {
    pub enum Speaker {
        User => "user",
        Agent => "agent",
    }
}

/// One line of recent dialogue as handed to prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl DialogueTurn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn agent(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Agent,
            text: text.into(),
        }
    }
}
