//! Two-layer session memory: a bounded turn history and an overall summary
//! holding the six-slot formulation.
//!
//! Formulation updates are conservative. A slot may only change when the turn
//! supplied evidence for it: a direct span from alignment, or a turn-record
//! keyword that matches the slot's cue lexicon (in which case the new entry
//! must be marked inferred). The check runs on every backend proposal; slots
//! that still violate it after the retry budget keep their prior entry.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::*;
use crate::gateway::{Gateway, GatewayError, PromptContext, PromptKind};
use crate::schema::{SchemaViolation, ValidationContext};

const BUILTIN_CUES: &str = include_str!("../assets/slot_cues.json");

/// Keywords that count as indirect evidence for each slot. A record keyword
/// matches a cue when it contains the cue, ignoring case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCueLexicon(SlotMap<Vec<String>>);

impl SlotCueLexicon {
    pub fn new(cues: SlotMap<Vec<String>>) -> Self {
        Self(cues.map(|_, list| list.iter().map(|c| c.to_lowercase()).collect()))
    }

    pub fn builtin() -> Self {
        Self::new(serde_json::from_str(BUILTIN_CUES).expect("shipped slot cue lexicon is valid"))
    }

    pub fn empty() -> Self {
        Self(SlotMap::default())
    }

    pub fn matches(&self, slot: SlotId, keyword: &str) -> bool {
        let keyword = keyword.to_lowercase();
        self.0[slot]
            .iter()
            .any(|cue| !cue.is_empty() && keyword.contains(cue.as_str()))
    }

    /// The first record keyword that supports `slot`, if any.
    pub fn supporting_keyword<'r>(&self, slot: SlotId, record: &'r TurnRecord) -> Option<&'r str> {
        record
            .keywords
            .iter()
            .map(String::as_str)
            .find(|k| self.matches(slot, k))
    }
}

impl Default for SlotCueLexicon {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    None,
    Cue,
    Direct,
}

pub fn evidence_for(
    slot: SlotId,
    record: &TurnRecord,
    spans: &PppppiSpans,
    cues: &SlotCueLexicon,
) -> Evidence {
    if !spans[slot].is_empty() {
        Evidence::Direct
    } else if cues.supporting_keyword(slot, record).is_some() {
        Evidence::Cue
    } else {
        Evidence::None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("slot {slot} changed without supporting evidence: {reason}")]
pub struct ConservatismViolation {
    pub slot: SlotId,
    pub reason: String,
}

impl From<&ConservatismViolation> for SchemaViolation {
    fn from(v: &ConservatismViolation) -> Self {
        SchemaViolation::new(v.slot.as_str(), v.reason.clone())
    }
}

/// Slots in `proposed` whose content changed without the evidence this turn allows.
pub fn conservatism_violations(
    prior: &PppppiAnalysis,
    proposed: &PppppiAnalysis,
    record: &TurnRecord,
    spans: &PppppiSpans,
    cues: &SlotCueLexicon,
) -> Vec<ConservatismViolation> {
    let mut out = Vec::new();
    for slot in canonical_slot_order() {
        if proposed[slot].same_content(&prior[slot]) {
            continue;
        }
        match evidence_for(slot, record, spans, cues) {
            Evidence::Direct => {}
            Evidence::Cue if proposed[slot].is_inferred => {}
            Evidence::Cue => out.push(ConservatismViolation {
                slot,
                reason:
                    "only keyword cues support this slot, so the entry must be marked is_inferred"
                        .into(),
            }),
            Evidence::None => out.push(ConservatismViolation {
                slot,
                reason: "no span or cue in this turn supports a change; copy the current entry"
                    .into(),
            }),
        }
    }
    out
}

/// Builds the committed analysis: violating slots keep their prior entry, and
/// `changed` and `provenance` are recomputed from content rather than trusted.
pub fn enforce_conservatism(
    prior: &PppppiAnalysis,
    proposed: &PppppiAnalysis,
    record: &TurnRecord,
    spans: &PppppiSpans,
    cues: &SlotCueLexicon,
    turn_index: u32,
) -> (PppppiAnalysis, Vec<ConservatismViolation>) {
    let violations = conservatism_violations(prior, proposed, record, spans, cues);
    let analysis = PppppiAnalysis::from_fn(|slot| {
        let before = &prior[slot];
        let after = &proposed[slot];
        if after.same_content(before) || violations.iter().any(|v| v.slot == slot) {
            return before.with_changed(false);
        }
        let mut provenance = before.provenance.clone();
        provenance.push(turn_index);
        PppppiEntry {
            text: after.text.clone(),
            evidence: after.evidence.clone(),
            is_inferred: after.is_inferred && spans[slot].is_empty(),
            changed: true,
            provenance,
        }
    });
    (analysis, violations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Turn-history capacity.
    pub capacity: usize,
    /// Dialogue lines handed to prompts as recent context.
    pub recent_window: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 10,
            recent_window: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryState {
    pub capacity: usize,
    pub turn_history: VecDeque<TurnRecord>,
    pub summary: OverallSummary,
    /// Completed user turns so far; also the index of the next turn.
    pub turn_index: u32,
}

impl MemoryState {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            turn_history: VecDeque::new(),
            summary: OverallSummary::default(),
            turn_index: 0,
        }
    }

    /// Appends a record, evicting the oldest when full.
    pub fn push_record(&mut self, record: TurnRecord) {
        while self.turn_history.len() >= self.capacity {
            self.turn_history.pop_front();
        }
        self.turn_history.push_back(record);
    }

    pub fn recent_records(&self, n: usize) -> Vec<TurnRecord> {
        let skip = self.turn_history.len().saturating_sub(n);
        self.turn_history.iter().skip(skip).cloned().collect()
    }

    pub fn snapshot(&self) -> Value {
        serde_json::to_value(self).expect("memory state is plain data")
    }

    pub fn restore(doc: &Value) -> Result<Self, serde_json::Error> {
        let state: Self = serde_json::from_value(doc.clone())?;
        if state.turn_history.len() > state.capacity {
            return Err(serde::de::Error::custom("turn_history exceeds capacity"));
        }
        Ok(state)
    }
}

impl Default for MemoryState {
    fn default() -> Self {
        Self::new(MemoryConfig::default().capacity)
    }
}

pub fn build_turn_record(
    gateway: &Gateway,
    utterance: &str,
    recent_turns: &[DialogueTurn],
    turn_index: u32,
) -> Result<TurnRecord, GatewayError> {
    let ctx = PromptContext::new(turn_index)
        .with("utterance", utterance)
        .with("recent_turns", recent_turns);
    gateway.complete(PromptKind::TurnHistory, &ctx, &ValidationContext::default())
}

/// Result of a formulation update. `rejected` lists slots whose proposed
/// change was refused after the retry budget and kept at the prior entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PppppiUpdate {
    pub analysis: PppppiAnalysis,
    pub rejected: Vec<ConservatismViolation>,
}

#[allow(clippy::too_many_arguments)]
pub fn update_pppppi(
    gateway: &Gateway,
    current: &PppppiAnalysis,
    record: &TurnRecord,
    spans: &PppppiSpans,
    tom: &TomState,
    turn_index: u32,
    cues: &SlotCueLexicon,
) -> Result<PppppiUpdate, GatewayError> {
    let ctx = PromptContext::new(turn_index)
        .with("analysis", current)
        .with("record", record)
        .with("spans", spans)
        .with("tom", tom)
        .with("turn_index", turn_index);
    let vctx = ValidationContext {
        source: None,
        turn_index: Some(turn_index),
    };
    let check = |proposed: &PppppiAnalysis| match conservatism_violations(
        current, proposed, record, spans, cues,
    )
    .first()
    {
        Some(v) => Err(SchemaViolation::from(v)),
        None => Ok(()),
    };
    let checked = gateway.complete_checked(PromptKind::PppppiUpdate, &ctx, &vctx, &check, None)?;
    let (analysis, rejected) =
        enforce_conservatism(current, &checked.value, record, spans, cues, turn_index);
    if !rejected.is_empty() {
        tracing::warn!(turn_index, slots = ?rejected.iter().map(|v| v.slot).collect::<Vec<_>>(), "kept prior entries after conservatism violations");
    }
    Ok(PppppiUpdate { analysis, rejected })
}

pub fn update_summary(
    gateway: &Gateway,
    current: &OverallSummary,
    utterance: &str,
    record: &TurnRecord,
    analysis: &PppppiAnalysis,
    turn_index: u32,
) -> Result<OverallSummary, GatewayError> {
    let previous = SummaryUpdate {
        core_narrative: current.core_narrative.clone(),
        core_emotion: current.core_emotion.clone(),
        recurring_themes: current.recurring_themes.clone(),
    };
    let ctx = PromptContext::new(turn_index)
        .with("summary", &previous)
        .with("utterance", utterance)
        .with("record", record)
        .with("analysis", analysis);
    let update: SummaryUpdate = gateway.complete(
        PromptKind::SummaryUpdate,
        &ctx,
        &ValidationContext::default(),
    )?;
    Ok(OverallSummary {
        core_narrative: update.core_narrative,
        core_emotion: update.core_emotion,
        recurring_themes: update.recurring_themes,
        analysis: analysis.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, PromptTemplates, ScriptedBackend};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn record(keywords: &[&str]) -> TurnRecord {
        TurnRecord {
            summary: "x.".into(),
            keywords: keywords.iter().map(|s| s.to_string()).collect(),
            events: vec![],
            emotions: vec![],
        }
    }

    fn entry(text: &str) -> PppppiEntry {
        PppppiEntry {
            text: text.into(),
            evidence: vec![text.into()],
            ..Default::default()
        }
    }

    #[test]
    fn cue_lexicon_matching() {
        let cues = SlotCueLexicon::builtin();
        assert!(cues.matches(SlotId::Impact, "Sleep"));
        assert!(cues.matches(SlotId::Precipitating, "시험에서"));
        assert!(!cues.matches(SlotId::Predisposing, "sleep"));
    }

    #[test]
    fn no_evidence_keeps_prior() {
        let prior = PppppiAnalysis::default();
        let mut proposed = prior.clone();
        proposed[SlotId::Predisposing] = entry("strict parents");
        let (out, rejected) = enforce_conservatism(
            &prior,
            &proposed,
            &record(&["walk"]),
            &PppppiSpans::default(),
            &SlotCueLexicon::builtin(),
            2,
        );
        assert_eq!(out, prior);
        assert_eq!(rejected.len(), 1);
        assert_eq!(rejected[0].slot, SlotId::Predisposing);
    }

    #[test]
    fn cue_evidence_requires_inference_flag() {
        let prior = PppppiAnalysis::default();
        let mut proposed = prior.clone();
        proposed[SlotId::Impact] = entry("poor sleep");
        let rec = record(&["sleep"]);
        let cues = SlotCueLexicon::builtin();
        let spans = PppppiSpans::default();
        assert_eq!(
            conservatism_violations(&prior, &proposed, &rec, &spans, &cues).len(),
            1
        );
        proposed[SlotId::Impact].is_inferred = true;
        let (out, rejected) = enforce_conservatism(&prior, &proposed, &rec, &spans, &cues, 4);
        assert!(rejected.is_empty());
        assert!(out[SlotId::Impact].changed);
        assert_eq!(out[SlotId::Impact].provenance, vec![4]);
    }

    #[test]
    fn direct_span_change_appends_provenance_and_clears_inference() {
        let mut prior = PppppiAnalysis::default();
        prior[SlotId::Precipitating] = PppppiEntry {
            text: "old".into(),
            evidence: vec![],
            is_inferred: true,
            changed: true,
            provenance: vec![1],
        };
        let mut proposed = prior.clone();
        proposed[SlotId::Precipitating] = PppppiEntry {
            text: "yesterday's argument".into(),
            evidence: vec!["yesterday's argument".into()],
            is_inferred: true,
            changed: false,
            provenance: vec![],
        };
        let mut spans = PppppiSpans::default();
        spans[SlotId::Precipitating] = vec!["yesterday's argument".into()];
        let (out, _) = enforce_conservatism(
            &prior,
            &proposed,
            &record(&[]),
            &spans,
            &SlotCueLexicon::builtin(),
            3,
        );
        let e = &out[SlotId::Precipitating];
        assert!(e.changed);
        assert!(!e.is_inferred);
        assert_eq!(e.provenance, vec![1, 3]);
        assert!(!out[SlotId::Impact].changed);
    }

    #[test]
    fn ring_is_fifo_and_bounded() {
        let mut m = MemoryState::new(3);
        for i in 0..5 {
            m.push_record(record(&[&format!("k{i}")]));
            assert!(m.turn_history.len() <= 3);
        }
        let kws: Vec<_> = m
            .turn_history
            .iter()
            .map(|r| r.keywords[0].clone())
            .collect();
        assert_eq!(kws, vec!["k2", "k3", "k4"]);
        assert_eq!(m.recent_records(2).len(), 2);
    }

    #[test]
    fn snapshot_round_trip() {
        let empty = MemoryState::default();
        let doc = empty.snapshot();
        assert_eq!(doc["turn_history"], serde_json::json!([]));
        assert_eq!(MemoryState::restore(&doc).unwrap(), empty);
        let mut m = MemoryState::new(2);
        m.push_record(record(&["a"]));
        m.turn_index = 1;
        m.summary.core_narrative = "Hi.".into();
        assert_eq!(MemoryState::restore(&m.snapshot()).unwrap(), m);
        let mut bad = m.snapshot();
        bad["capacity"] = serde_json::json!(0);
        assert!(MemoryState::restore(&bad).is_err());
    }

    fn mock_gateway() -> Gateway {
        Gateway::mock()
    }

    #[test]
    fn empty_spans_leave_analysis_identical() {
        let gw = mock_gateway();
        let mut current = PppppiAnalysis::default();
        current[SlotId::Presenting] = PppppiEntry {
            text: "stress".into(),
            evidence: vec!["stress".into()],
            is_inferred: false,
            changed: true,
            provenance: vec![0],
        };
        let out = update_pppppi(
            &gw,
            &current,
            &record(&["walk"]),
            &PppppiSpans::default(),
            &TomState::neutral(),
            1,
            &SlotCueLexicon::builtin(),
        )
        .unwrap();
        assert_eq!(out.analysis, current.map(|_, e| e.with_changed(false)));
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn span_at_turn_three_updates_provenance() {
        let gw = mock_gateway();
        let mut spans = PppppiSpans::default();
        spans[SlotId::Precipitating] = vec!["yesterday's argument".into()];
        let out = update_pppppi(
            &gw,
            &PppppiAnalysis::default(),
            &record(&["argument"]),
            &spans,
            &TomState::neutral(),
            3,
            &SlotCueLexicon::builtin(),
        )
        .unwrap();
        let e = &out.analysis[SlotId::Precipitating];
        assert!(e.changed);
        assert_eq!(e.provenance, vec![3]);
        assert_eq!(e.text, "yesterday's argument");
    }

    #[test]
    fn adversarial_backend_is_retried_then_overruled() {
        let mut bad = PppppiAnalysis::default();
        bad[SlotId::Predisposing] = entry("strict parents");
        let reply = serde_json::to_string(&bad).unwrap();
        let gw = Gateway::new(
            Arc::new(ScriptedBackend::new().always(PromptKind::PppppiUpdate, reply)),
            Arc::new(PromptTemplates::builtin()),
            GatewayConfig::mock(),
        );
        let out = update_pppppi(
            &gw,
            &PppppiAnalysis::default(),
            &record(&["walk"]),
            &PppppiSpans::default(),
            &TomState::neutral(),
            0,
            &SlotCueLexicon::builtin(),
        )
        .unwrap();
        assert_eq!(out.analysis, PppppiAnalysis::default());
        assert_eq!(out.rejected[0].slot, SlotId::Predisposing);
        assert_eq!(gw.ledger()[0].attempts, 3);
    }

    #[test]
    fn summary_embeds_analysis_and_is_nonempty_on_first_turn() {
        let gw = mock_gateway();
        let mut analysis = PppppiAnalysis::default();
        analysis[SlotId::Presenting] = entry("anxious about my career");
        let rec = build_turn_record(&gw, "I'm anxious about my career", &[], 0).unwrap();
        let s = update_summary(
            &gw,
            &OverallSummary::default(),
            "I'm anxious about my career",
            &rec,
            &analysis,
            0,
        )
        .unwrap();
        assert!(!s.core_narrative.is_empty());
        assert_eq!(s.analysis, analysis);
        assert!(s.recurring_themes.len() <= 1);
    }

    #[test]
    fn turn_record_guarantees_a_keyword() {
        let gw = mock_gateway();
        let r = build_turn_record(&gw, "I failed the exam and feel ashamed", &[], 0).unwrap();
        assert!(!r.keywords.is_empty());
    }

    fn arb_entry() -> impl Strategy<Value = PppppiEntry> {
        (
            prop::sample::select(vec!["", "a", "b"]),
            prop::collection::vec(prop::sample::select(vec!["x", "y"]), 0..2),
            any::<bool>(),
            prop::collection::vec(0u32..5, 0..3),
        )
            .prop_map(|(t, e, inf, p)| PppppiEntry {
                text: t.into(),
                evidence: e.into_iter().map(String::from).collect(),
                is_inferred: inf,
                changed: false,
                provenance: p,
            })
    }

    fn arb_analysis() -> impl Strategy<Value = PppppiAnalysis> {
        prop::collection::vec(arb_entry(), 6).prop_map(|v| {
            let mut it = v.into_iter();
            PppppiAnalysis::from_fn(|_| it.next().unwrap())
        })
    }

    proptest! {
        #[test]
        fn enforcement_invariants(
            prior in arb_analysis(),
            proposed in arb_analysis(),
            span_slots in prop::collection::vec(any::<bool>(), 6),
            keyword in prop::sample::select(vec!["walk", "sleep", "exam", "friend"]),
            turn in 5u32..9,
        ) {
            let mut spans = PppppiSpans::default();
            for (slot, on) in canonical_slot_order().into_iter().zip(&span_slots) {
                if *on { spans[slot] = vec!["s".into()]; }
            }
            let rec = record(&[keyword]);
            let cues = SlotCueLexicon::builtin();
            let (out, _) = enforce_conservatism(&prior, &proposed, &rec, &spans, &cues, turn);
            for slot in canonical_slot_order() {
                let (b, a) = (&prior[slot], &out[slot]);
                prop_assert_eq!(a.changed, !a.same_content(b));
                prop_assert!(a.provenance.starts_with(&b.provenance));
                if a.changed {
                    prop_assert_eq!(a.provenance.last().copied(), Some(turn));
                    prop_assert_eq!(a.provenance.len(), b.provenance.len() + 1);
                } else {
                    prop_assert_eq!(a, &b.with_changed(false));
                }
                if evidence_for(slot, &rec, &spans, &cues) == Evidence::None {
                    prop_assert!(!a.changed);
                }
            }
        }
    }
}
