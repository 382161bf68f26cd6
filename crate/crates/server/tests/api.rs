use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use psyprobe_core::config::AppConfig;
use psyprobe_core::domain::{SessionMode, Speaker};
use psyprobe_core::engine::Engine;
use psyprobe_core::gateway::{
    Backend, BackendError, BackendRequest, FnBackend, MockBackend, PromptKind, PromptTemplates,
};
use psyprobe_core::session::{
    import_entries, ManualClock, SessionConfig, SessionService, SystemClock,
};
use psyprobe_server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn clock() -> ManualClock {
    ManualClock::new("2025-03-01T09:00:00Z".parse().unwrap())
}

fn app_with(clock: &ManualClock) -> Router {
    let service = AppConfig::default()
        .build_service(Arc::new(clock.clone()), true)
        .unwrap();
    router(AppState::new(service, SessionConfig::default()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, _, bytes) = call_raw(app, method, uri, body).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn create_returns_initial_state() {
    let app = app_with(&clock());
    let (status, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"concern": "취업 준비가 힘들어요", "emotion": "불안"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let state = &v["state"];
    assert_eq!(state["turn_index"], 0);
    assert_eq!(state["mode"], "full");
    assert_eq!(state["remaining_secs"], 1200);
    assert_eq!(state["closed"], false);
    assert_eq!(state["memory"]["turn_history"], json!([]));
    assert_eq!(state["ranking"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn create_applies_overrides_and_ids_differ() {
    let app = app_with(&clock());
    let body =
        json!({"concern": "work", "mode": "baseline", "language": "en", "time_limit_secs": 60});
    let a = create(&app, body.clone()).await;
    let b = create(&app, body).await;
    assert_ne!(a, b);
    let (_, state) = call(&app, "GET", &format!("/sessions/{a}/state"), None).await;
    assert_eq!(state["mode"], "baseline");
    assert_eq!(state["remaining_secs"], 60);
}

#[tokio::test]
async fn bad_create_requests_are_400() {
    let app = app_with(&clock());
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({"concern": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_config");
    let (status, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"concern": "x", "mode": "half"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");
    let (status, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"concern": "x", "time_limit_secs": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn message_round_trip_updates_state() {
    let app = app_with(&clock());
    let id = create(
        &app,
        json!({"concern": "I can't focus at work", "emotion": "anxious", "language": "en"}),
    )
    .await;
    let (status, reply) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "My boss criticised my report and I keep replaying it."})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{reply}");
    assert_eq!(reply["turn_index"], 0);
    assert!(!reply["text"].as_str().unwrap().is_empty());
    let (_, state) = call(&app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(state["turn_index"], 1);
    assert_eq!(state["memory"]["turn_history"].as_array().unwrap().len(), 1);
    assert_eq!(state["ranking"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn empty_message_and_unknown_session() {
    let app = app_with(&clock());
    let id = create(&app, json!({"concern": "sleep"})).await;
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": " "})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = call(&app, "GET", "/sessions/nope/state", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_session");
    let (status, _) = call(
        &app,
        "POST",
        "/sessions/nope/messages",
        Some(json!({"text": "hi"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/sessions/nope/transcript", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ended_session_rejects_messages() {
    let app = app_with(&clock());
    let id = create(&app, json!({"concern": "exams", "language": "en"})).await;
    call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "I failed again."})),
    )
    .await;
    let (status, ended) = call(&app, "POST", &format!("/sessions/{id}/end"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ended["closed"], true);
    assert_eq!(ended["transcript"].as_array().unwrap().len(), 2);
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "종료"})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "session_closed");
    let (_, state) = call(&app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(state["closed"], true);
    assert_eq!(state["remaining_secs"], 0);
}

#[tokio::test]
async fn time_limit_closes_session() {
    let clock = clock();
    let app = app_with(&clock);
    let id = create(&app, json!({"concern": "family"})).await;
    clock.advance(Duration::from_secs(19 * 60));
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "엄마랑 싸웠어요"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (_, state) = call(&app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(state["remaining_secs"], 60);
    clock.advance(Duration::from_secs(60));
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "또 얘기해요"})),
    )
    .await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(v["error"], "time_limit_exceeded");
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "hello"})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
}

#[tokio::test]
async fn transcript_is_line_delimited_and_alternates() {
    let app = app_with(&clock());
    let id = create(
        &app,
        json!({"concern": "lonely since moving", "language": "en"}),
    )
    .await;
    for text in [
        "I moved here in spring.",
        "Nobody calls me.",
        "Walking helps a bit.",
    ] {
        let (status, _) = call(
            &app,
            "POST",
            &format!("/sessions/{id}/messages"),
            Some(json!({"text": text})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, headers, body) =
        call_raw(&app, "GET", &format!("/sessions/{id}/transcript"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "application/x-ndjson");
    assert!(headers[header::CONTENT_DISPOSITION]
        .to_str()
        .unwrap()
        .contains(&format!("{id}.jsonl")));
    let entries = import_entries(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(entries.len(), 6);
    for (i, e) in entries.iter().enumerate() {
        let want = if i % 2 == 0 {
            Speaker::User
        } else {
            Speaker::Agent
        };
        assert_eq!(e.speaker, want);
        assert_eq!(e.turn_index as usize, i / 2);
    }
    assert_eq!(entries[0].meta.as_ref().unwrap().session_id, id);
    assert_eq!(entries[0].meta.as_ref().unwrap().mode, SessionMode::Full);
    assert!(entries[1].stage_artifacts.is_some());
}

#[tokio::test]
async fn pipeline_failure_reports_stage_and_keeps_state() {
    let mock = MockBackend::builtin();
    let backend = Arc::new(FnBackend::new(move |req: &BackendRequest<'_>| {
        if req.kind == PromptKind::Draft {
            Err(BackendError::Transport("connection reset".into()))
        } else {
            mock.complete(req)
        }
    })) as Arc<dyn Backend>;
    let service = SessionService::new(
        Engine::default(),
        Arc::new(PromptTemplates::builtin()),
        Arc::new(move |_| Ok(backend.clone())),
        Arc::new(SystemClock),
        None,
    );
    let app = router(AppState::new(service, SessionConfig::default()));
    let id = create(&app, json!({"concern": "stress", "language": "en"})).await;
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "Work is too much."})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(v["error"], "pipeline_error");
    assert_eq!(v["stage"], "response_generator");
    let (_, state) = call(&app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(state["turn_index"], 0);
    let (_, _, body) = call_raw(&app, "GET", &format!("/sessions/{id}/transcript"), None).await;
    assert!(body.is_empty());
}

#[tokio::test]
async fn transcripts_persist_to_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let config = AppConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..AppConfig::default()
    };
    let service = config.build_service(Arc::new(SystemClock), true).unwrap();
    let app = router(AppState::new(service, SessionConfig::default()));
    let id = create(&app, json!({"concern": "sleep", "language": "en"})).await;
    call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({"text": "I wake at 3am."})),
    )
    .await;
    let stored = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(import_entries(&stored).unwrap().len(), 2);
}
