use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::{Map, Value};

use super::{KindSettings, PromptKind};

/// One backend invocation. `vars` are the structured template variables the
/// prompt was rendered from; real providers only read `prompt`.
#[derive(Debug, Clone, Copy)]
pub struct BackendRequest<'a> {
    pub kind: PromptKind,
    pub prompt: &'a str,
    pub vars: &'a Map<String, Value>,
    /// 1-based attempt number within one gateway call.
    pub attempt: u32,
    pub settings: KindSettings,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected provider response: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// A text-generation backend. Implementations must be safe to call from
/// several sessions at once.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

type Handler = dyn Fn(&BackendRequest<'_>) -> Result<String, BackendError> + Send + Sync;

/// Backend defined by a closure. Handy for adversarial test doubles.
pub struct FnBackend(Box<Handler>);

impl FnBackend {
    pub fn new(
        f: impl Fn(&BackendRequest<'_>) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self(Box::new(f))
    }
}

impl Backend for FnBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        (self.0)(request)
    }
}

/// Replays queued replies per kind. `always` replies are used once a kind's
/// queue is empty; anything else goes to the fallback backend.
#[derive(Default)]
pub struct ScriptedBackend {
    queued: Mutex<HashMap<PromptKind, VecDeque<String>>>,
    always: HashMap<PromptKind, String>,
    fallback: Option<Arc<dyn Backend>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn then(self, kind: PromptKind, reply: impl Into<String>) -> Self {
        self.queued
            .lock()
            .entry(kind)
            .or_default()
            .push_back(reply.into());
        self
    }

    pub fn always(mut self, kind: PromptKind, reply: impl Into<String>) -> Self {
        self.always.insert(kind, reply.into());
        self
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn Backend>) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        if let Some(reply) = self
            .queued
            .lock()
            .get_mut(&request.kind)
            .and_then(VecDeque::pop_front)
        {
            return Ok(reply);
        }
        if let Some(reply) = self.always.get(&request.kind) {
            return Ok(reply.clone());
        }
        match &self.fallback {
            Some(fallback) => fallback.complete(request),
            None => Err(BackendError::Config(format!(
                "no scripted reply for {}",
                request.kind
            ))),
        }
    }
}
