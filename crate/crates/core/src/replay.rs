//! Deterministic session replay against the mock backend.
//!
//! A [`ReplayScript`] fixes everything that would otherwise vary between runs:
//! the start time, the spacing between user messages and the session id. Two
//! replays of the same script produce byte-identical transcripts.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::SessionMode;
use crate::engine::Engine;
use crate::gateway::PromptTemplates;
use crate::session::{
    export_entries, mock_backend_factory, ManualClock, SessionConfig, SessionError, SessionService,
    TurnEntry,
};

/// Session id written into replayed transcripts in place of the random one.
pub const REPLAY_SESSION_ID: &str = "replay";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayScript {
    pub mode: SessionMode,
    pub language: String,
    pub concern: String,
    pub emotion: String,
    pub started_at: DateTime<Utc>,
    /// Clock advance before each user message.
    pub step_secs: u64,
    pub messages: Vec<String>,
}

/// Runs every scripted message through a fresh mock-backed session and
/// returns the transcript with a fixed session id.
pub fn replay(script: &ReplayScript, engine: Engine) -> Result<Vec<TurnEntry>, SessionError> {
    let clock = ManualClock::new(script.started_at);
    let service = SessionService::new(
        engine,
        Arc::new(PromptTemplates::builtin()),
        mock_backend_factory(),
        Arc::new(clock.clone()),
        None,
    );
    let config = SessionConfig {
        mode: script.mode,
        language: script.language.clone(),
        ..SessionConfig::default()
    };
    let id = service.create_session(config, &script.concern, &script.emotion)?;
    for message in &script.messages {
        clock.advance(Duration::from_secs(script.step_secs));
        service.post_message(&id, message)?;
    }
    let mut entries = service.export_transcript(&id)?;
    for meta in entries.iter_mut().filter_map(|e| e.meta.as_mut()) {
        meta.session_id = REPLAY_SESSION_ID.to_string();
    }
    Ok(entries)
}

/// [`replay`] rendered as transcript lines.
pub fn replay_to_string(script: &ReplayScript, engine: Engine) -> Result<String, SessionError> {
    replay(script, engine).map(|e| export_entries(&e))
}

/// First differing line between two transcripts, 1-based, with both sides.
pub fn first_difference(expected: &str, actual: &str) -> Option<(usize, String, String)> {
    let mut e = expected.lines();
    let mut a = actual.lines();
    let mut line = 0;
    loop {
        line += 1;
        match (e.next(), a.next()) {
            (None, None) => return None,
            (x, y) if x == y => continue,
            (x, y) => {
                return Some((
                    line,
                    x.unwrap_or("<end>").to_string(),
                    y.unwrap_or("<end>").to_string(),
                ))
            }
        }
    }
}
