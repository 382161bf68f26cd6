//! Session ownership: the clock, turn serialization, and transcript
//! persistence around [`Engine::run_turn`].

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::domain::*;
use crate::engine::{Engine, PipelineError, StageArtifacts, TurnInput};
use crate::gateway::{Backend, Gateway, GatewayConfig, MockBackend, PromptTemplates};
use crate::memory::MemoryState;
use crate::response::GapRanking;

pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(20 * 60);

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.0.lock();
        *now += chrono::Duration::from_std(by).expect("duration in range");
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub mode: SessionMode,
    #[serde(rename = "time_limit_secs", with = "duration_secs")]
    pub time_limit: Duration,
    pub language: String,
    pub backend: GatewayConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: SessionMode::Full,
            time_limit: DEFAULT_TIME_LIMIT,
            language: "ko".into(),
            backend: GatewayConfig::default(),
        }
    }
}

/// Session-level facts written on the first transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub mode: SessionMode,
    pub language: String,
    pub concern: String,
    pub emotion: String,
    pub started_at: DateTime<Utc>,
}

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEntry {
    pub turn_index: u32,
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_artifacts: Option<StageArtifacts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_snapshot: Option<MemoryState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SessionMeta>,
}

impl TurnEntry {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("turn entries are plain data")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("cannot access transcript {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Serializes entries as line-delimited JSON.
pub fn export_entries(entries: &[TurnEntry]) -> String {
    entries.iter().map(|e| e.to_line() + "\n").collect()
}

pub fn import_entries(text: &str) -> Result<Vec<TurnEntry>, TranscriptError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TranscriptError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_transcript(path: &Path) -> Result<Vec<TurnEntry>, TranscriptError> {
    let io = |e: std::io::Error| TranscriptError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| TranscriptError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Append-only transcript files, one per session.
#[derive(Debug, Clone)]
pub struct TranscriptStore {
    dir: PathBuf,
}

impl TranscriptStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, TranscriptError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| TranscriptError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    /// Appends all `entries` with a single write.
    pub fn append(&self, session_id: &str, entries: &[TurnEntry]) -> Result<(), TranscriptError> {
        let path = self.path_for(session_id);
        let io = |e: std::io::Error| TranscriptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        file.write_all(export_entries(entries).as_bytes())
            .map_err(io)?;
        file.sync_data().map_err(io)
    }

    pub fn load(&self, session_id: &str) -> Result<Vec<TurnEntry>, TranscriptError> {
        read_transcript(&self.path_for(session_id))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("session time limit reached; session closed")]
    TimeLimitExceeded,
    #[error("a turn is already in progress for this session")]
    Busy,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("persistence failed: {0}")]
    Persistence(#[from] TranscriptError),
}

/// Read-only view of a session's state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub mode: SessionMode,
    pub closed: bool,
    pub turn_index: u32,
    pub remaining_secs: u64,
    pub memory: MemoryState,
    pub ranking: GapRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReply {
    pub session_id: String,
    pub turn_index: u32,
    pub text: String,
}

#[derive(Debug, Clone)]
struct Session {
    meta: SessionMeta,
    config: SessionConfig,
    memory: MemoryState,
    transcript: Vec<TurnEntry>,
    closed: bool,
}

struct SessionSlot {
    session: Mutex<Session>,
    gateway: Gateway,
    busy: AtomicBool,
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

/// Builds the backend for a session from its gateway config.
pub type BackendFactory =
    Arc<dyn Fn(&GatewayConfig) -> Result<Arc<dyn Backend>, String> + Send + Sync>;

/// Backend factory that always returns the shipped mock.
pub fn mock_backend_factory() -> BackendFactory {
    Arc::new(|_| Ok(Arc::new(MockBackend::builtin()) as Arc<dyn Backend>))
}

/// Mock for `mock` configs, the HTTP provider (keyed from the environment)
/// otherwise.
pub fn default_backend_factory() -> BackendFactory {
    Arc::new(|config: &GatewayConfig| match config.backend {
        crate::gateway::BackendKind::Mock => {
            Ok(Arc::new(MockBackend::builtin()) as Arc<dyn Backend>)
        }
        crate::gateway::BackendKind::HttpProvider => crate::gateway::HttpBackend::from_env(config)
            .map(|b| Arc::new(b) as Arc<dyn Backend>)
            .map_err(|e| e.to_string()),
    })
}

pub struct SessionService {
    engine: Engine,
    templates: Arc<PromptTemplates>,
    backends: BackendFactory,
    clock: Arc<dyn Clock>,
    store: Option<TranscriptStore>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

impl SessionService {
    pub fn new(
        engine: Engine,
        templates: Arc<PromptTemplates>,
        backends: BackendFactory,
        clock: Arc<dyn Clock>,
        store: Option<TranscriptStore>,
    ) -> Self {
        Self {
            engine,
            templates,
            backends,
            clock,
            store,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Mock backend, system clock, no persistence.
    pub fn mock() -> Self {
        Self::new(
            Engine::default(),
            Arc::new(PromptTemplates::builtin()),
            mock_backend_factory(),
            Arc::new(SystemClock),
            None,
        )
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, SessionError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn create_session(
        &self,
        config: SessionConfig,
        presenting_concern: &str,
        emotion: &str,
    ) -> Result<String, SessionError> {
        if presenting_concern.trim().is_empty() {
            return Err(SessionError::InvalidConfig(
                "presenting concern is empty".into(),
            ));
        }
        if config.time_limit.is_zero() {
            return Err(SessionError::InvalidConfig(
                "time limit must be positive".into(),
            ));
        }
        if config.language.trim().is_empty() {
            return Err(SessionError::InvalidConfig("language is empty".into()));
        }
        let backend = (self.backends)(&config.backend).map_err(SessionError::InvalidConfig)?;
        let gateway = Gateway::new(backend, self.templates.clone(), config.backend.clone());
        let id = uuid::Uuid::new_v4().simple().to_string();
        let meta = SessionMeta {
            session_id: id.clone(),
            mode: config.mode,
            language: config.language.clone(),
            concern: presenting_concern.trim().to_string(),
            emotion: emotion.trim().to_string(),
            started_at: self.clock.now(),
        };
        let session = Session {
            meta,
            memory: self.engine.new_memory(),
            config,
            transcript: Vec::new(),
            closed: false,
        };
        tracing::info!(session = %id, mode = %session.config.mode, "session created");
        self.sessions.write().insert(
            id.clone(),
            Arc::new(SessionSlot {
                session: Mutex::new(session),
                gateway,
                busy: AtomicBool::new(false),
            }),
        );
        Ok(id)
    }

    fn remaining(&self, s: &Session) -> Duration {
        let elapsed = (self.clock.now() - s.meta.started_at)
            .to_std()
            .unwrap_or_default();
        s.config.time_limit.saturating_sub(elapsed)
    }

    /// Runs one turn. Memory and transcript change only if every stage and
    /// the transcript write succeed.
    pub fn post_message(&self, session_id: &str, text: &str) -> Result<AgentReply, SessionError> {
        let slot = self.slot(session_id)?;
        if slot
            .busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(SessionError::Busy);
        }
        let _guard = BusyGuard(&slot.busy);

        let (meta, mode, memory, history) = {
            let mut s = slot.session.lock();
            if s.closed {
                return Err(SessionError::SessionClosed);
            }
            if self.remaining(&s).is_zero() {
                s.closed = true;
                tracing::info!(session = %session_id, "time limit reached");
                return Err(SessionError::TimeLimitExceeded);
            }
            let history: Vec<DialogueTurn> = s
                .transcript
                .iter()
                .map(|e| DialogueTurn {
                    speaker: e.speaker,
                    text: e.text.clone(),
                })
                .collect();
            (s.meta.clone(), s.config.mode, s.memory.clone(), history)
        };

        let user_at = self.clock.now();
        let out = self.engine.run_turn(
            &slot.gateway,
            &memory,
            TurnInput {
                mode,
                message: text.trim(),
                concern: &meta.concern,
                emotion: &meta.emotion,
                language: &meta.language,
                history: &history,
            },
        )?;
        let turn_index = memory.turn_index;
        let entries = [
            TurnEntry {
                turn_index,
                speaker: Speaker::User,
                text: text.trim().to_string(),
                timestamp: user_at,
                stage_artifacts: None,
                memory_snapshot: None,
                meta: (turn_index == 0).then(|| meta.clone()),
            },
            TurnEntry {
                turn_index,
                speaker: Speaker::Agent,
                text: out.reply.clone(),
                timestamp: self.clock.now(),
                stage_artifacts: Some(out.artifacts),
                memory_snapshot: Some(out.memory.clone()),
                meta: None,
            },
        ];
        if let Some(store) = &self.store {
            store.append(session_id, &entries)?;
        }
        let mut s = slot.session.lock();
        s.memory = out.memory;
        s.transcript.extend(entries);
        Ok(AgentReply {
            session_id: session_id.to_string(),
            turn_index,
            text: out.reply,
        })
    }

    pub fn get_state(&self, session_id: &str) -> Result<SessionState, SessionError> {
        let slot = self.slot(session_id)?;
        let s = slot.session.lock().clone();
        Ok(SessionState {
            session_id: session_id.to_string(),
            mode: s.config.mode,
            closed: s.closed,
            turn_index: s.memory.turn_index,
            remaining_secs: if s.closed {
                0
            } else {
                self.remaining(&s).as_secs()
            },
            ranking: self.engine.current_ranking(&s.memory),
            memory: s.memory,
        })
    }

    /// Closes the session and returns its transcript.
    pub fn end_session(&self, session_id: &str) -> Result<Vec<TurnEntry>, SessionError> {
        let slot = self.slot(session_id)?;
        let mut s = slot.session.lock();
        if !s.closed {
            s.closed = true;
            tracing::info!(session = %session_id, turns = s.memory.turn_index, "session ended");
        }
        Ok(s.transcript.clone())
    }

    pub fn export_transcript(&self, session_id: &str) -> Result<Vec<TurnEntry>, SessionError> {
        let slot = self.slot(session_id)?;
        let s = slot.session.lock();
        Ok(s.transcript.clone())
    }

    /// Prompt kinds recorded by the session's gateway, oldest first.
    pub fn ledger(
        &self,
        session_id: &str,
    ) -> Result<Vec<crate::gateway::CallLedgerEntry>, SessionError> {
        Ok(self.slot(session_id)?.gateway.ledger())
    }
}
