//! HTTP front end for [`SessionService`].
//!
//! | method | path                          | body / response                        |
//! |--------|-------------------------------|----------------------------------------|
//! | POST   | `/sessions`                   | [`CreateSession`] → [`SessionCreated`] |
//! | POST   | `/sessions/{id}/messages`     | [`PostMessage`] → `AgentReply`         |
//! | GET    | `/sessions/{id}/state`        | `SessionState`                         |
//! | POST   | `/sessions/{id}/end`          | [`SessionEnded`]                       |
//! | GET    | `/sessions/{id}/transcript`   | one `TurnEntry` JSON object per line   |
//!
//! Errors are `{"error": code, "message": text}` plus `"stage"` when a
//! pipeline stage failed.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use psyprobe_core::domain::SessionMode;
use psyprobe_core::engine::Stage;
use psyprobe_core::session::{
    export_entries, AgentReply, SessionConfig, SessionError, SessionService, SessionState,
    TurnEntry,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

#[derive(Clone)]
pub struct AppState {
    service: Arc<SessionService>,
    defaults: Arc<SessionConfig>,
}

impl AppState {
    /// `defaults` fills fields a create request leaves out.
    pub fn new(service: SessionService, defaults: SessionConfig) -> Self {
        Self {
            service: Arc::new(service),
            defaults: Arc::new(defaults),
        }
    }

    pub fn service(&self) -> &SessionService {
        &self.service
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub concern: String,
    #[serde(default)]
    pub emotion: String,
    #[serde(default)]
    pub mode: Option<SessionMode>,
    #[serde(default)]
    pub language: Option<String>,
    #[serde(default)]
    pub time_limit_secs: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub state: SessionState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionEnded {
    pub session_id: String,
    pub closed: bool,
    pub transcript: Vec<TurnEntry>,
}

/// An error response.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    stage: Option<Stage>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            stage: None,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::InvalidConfig(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_config", message)
            }
            SessionError::UnknownSession(_) => {
                Self::new(StatusCode::NOT_FOUND, "unknown_session", message)
            }
            SessionError::SessionClosed => {
                Self::new(StatusCode::CONFLICT, "session_closed", message)
            }
            SessionError::Busy => Self::new(StatusCode::CONFLICT, "busy", message),
            SessionError::TimeLimitExceeded => {
                Self::new(StatusCode::GONE, "time_limit_exceeded", message)
            }
            SessionError::Pipeline(p) => Self {
                stage: Some(p.stage),
                ..Self::new(StatusCode::BAD_GATEWAY, "pipeline_error", message)
            },
            SessionError::Persistence(_) => Self::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "persistence_error",
                message,
            ),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.code, "message": self.message});
        if let Some(stage) = self.stage {
            body["stage"] = json!(stage);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking service work off the async executor.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&SessionService) -> Result<T, SessionError> + Send + 'static,
) -> ApiResult<T> {
    let service = state.service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let Json(req) = body?;
    let mut config = (*state.defaults).clone();
    if let Some(mode) = req.mode {
        config.mode = mode;
    }
    if let Some(language) = req.language {
        config.language = language;
    }
    if let Some(secs) = req.time_limit_secs {
        config.time_limit = Duration::from_secs(secs);
    }
    let created = blocking(&state, move |s| {
        let id = s.create_session(config, &req.concern, &req.emotion)?;
        let state = s.get_state(&id)?;
        Ok(SessionCreated {
            session_id: id,
            state,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> ApiResult<Json<AgentReply>> {
    let Json(req) = body?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "message text is empty",
        ));
    }
    blocking(&state, move |s| s.post_message(&id, &req.text))
        .await
        .map(Json)
}

async fn get_state(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionState>> {
    blocking(&state, move |s| s.get_state(&id)).await.map(Json)
}

async fn end_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionEnded>> {
    blocking(&state, move |s| {
        let transcript = s.end_session(&id)?;
        Ok(SessionEnded {
            session_id: id,
            closed: true,
            transcript,
        })
    })
    .await
    .map(Json)
}

async fn transcript(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let disposition = format!("attachment; filename=\"{id}.jsonl\"");
    let entries = blocking(&state, move |s| s.export_transcript(&id)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-ndjson".to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        export_entries(&entries),
    )
        .into_response())
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/end", post(end_session))
        .route("/sessions/{id}/transcript", get(transcript))
        .layer(CorsLayer::permissive())
        .with_state(state)
}
