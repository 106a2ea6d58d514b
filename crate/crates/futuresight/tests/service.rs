mod common;

use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use futuresight::cli::generate_once;
use futuresight::service::{
    router, ApiError, AppState, CreateSessionResponse, DoneEvent, ErrorCode, HealthResponse, ScoreResponse, SetFutureResponse,
    TokenEvent, TranscriptResponse,
};
use futuresight_core::generation::{GenerationBudget, SamplingParams, StopReason};
use futuresight_core::model::InjectionMode;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const CONTEXT: &str = "Mara found a map in the attic. She packed bread and water.";
const FUTURE: &str = "The swamp creatures were relentless in their siege.";

fn state() -> AppState {
    AppState::new(Some(common::engine(InjectionMode::Memory)), Some(common::idf()), Duration::from_secs(3600))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> T {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

fn session_body(seed: u64) -> Value {
    json!({"context": CONTEXT, "future": FUTURE, "distance": 3, "sampling": {"seed": seed}})
}

async fn create(app: &Router, body: Value) -> String {
    let (status, bytes) = call(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&bytes));
    json_of::<CreateSessionResponse>(&bytes).id
}

#[derive(Debug, PartialEq)]
enum Sse {
    Token(TokenEvent),
    Done(DoneEvent),
    Error(ApiError),
}

fn parse_sse(bytes: &[u8]) -> Vec<Sse> {
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    text.split("\n\n")
        .filter(|block| !block.trim().is_empty())
        .map(|block| {
            let mut event = "";
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    event = v.trim_start();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.strip_prefix(' ').unwrap_or(v));
                }
            }
            match event {
                "token" => Sse::Token(json_of(data.as_bytes())),
                "done" => Sse::Done(json_of(data.as_bytes())),
                "error" => Sse::Error(json_of(data.as_bytes())),
                other => panic!("unexpected event {other:?}"),
            }
        })
        .collect()
}

async fn generate(app: &Router, id: &str, max_tokens: usize) -> (Vec<TokenEvent>, DoneEvent) {
    let (status, bytes) = call(app, Method::POST, &format!("/v1/sessions/{id}/generate"), Some(json!({"max_tokens": max_tokens}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let mut events = parse_sse(&bytes);
    let Some(Sse::Done(done)) = events.pop() else { panic!("stream must end with done: {events:?}") };
    let tokens = events
        .into_iter()
        .map(|e| match e {
            Sse::Token(t) => t,
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    (tokens, done)
}

async fn transcript(app: &Router, id: &str) -> TranscriptResponse {
    let (status, bytes) = call(app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    json_of(&bytes)
}

async fn swap(app: &Router, id: &str, future: &str, distance: usize) -> (StatusCode, Vec<u8>) {
    call(app, Method::PUT, &format!("/v1/sessions/{id}/future"), Some(json!({"future": future, "distance": distance}))).await
}

fn error_code(bytes: &[u8]) -> ErrorCode {
    json_of::<ApiError>(bytes).code
}

#[tokio::test]
async fn create_and_fresh_transcript() {
    let app = router(state(), None);
    let id = create(&app, session_body(1)).await;
    let t = transcript(&app, &id).await;
    assert_eq!(t.context, CONTEXT);
    assert!(t.generated_text.is_empty() && t.generated_ids.is_empty());
    assert_eq!(t.futures.len(), 1);
    assert_eq!((t.futures[0].future.as_str(), t.futures[0].distance, t.futures[0].token_offset), (FUTURE, 3, 0));
    assert_eq!(t.active_future.future, FUTURE);
}

#[tokio::test]
async fn create_errors() {
    let app = router(state(), None);
    let cases = [
        (json!({"context": CONTEXT, "future": "   ", "distance": 3}), ErrorCode::EmptyFuture),
        (json!({"context": CONTEXT.repeat(20), "future": FUTURE, "distance": 3}), ErrorCode::ContextTooLong),
        (json!({"context": CONTEXT, "future": FUTURE, "distance": 0}), ErrorCode::InvalidRequest),
        (json!({"context": "", "future": FUTURE, "distance": 2}), ErrorCode::InvalidRequest),
        (json!({"context": CONTEXT, "future": FUTURE}), ErrorCode::InvalidRequest),
        (json!({"context": CONTEXT, "future": FUTURE, "distance": 2, "sampling": {"temperature": -1.0}}), ErrorCode::InvalidRequest),
    ];
    for (body, code) in cases {
        let (status, bytes) = call(&app, Method::POST, "/v1/sessions", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(error_code(&bytes), code, "{body}");
    }
    let req = Request::post("/v1/sessions").header("content-type", "application/json").body(Body::from("{not json")).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&resp.into_body().collect().await.unwrap().to_bytes()), ErrorCode::InvalidRequest);
}

#[tokio::test]
async fn missing_model_and_idf() {
    let app = router(AppState::new(None, None, Duration::from_secs(60)), None);
    let (status, bytes) = call(&app, Method::POST, "/v1/sessions", Some(session_body(1))).await;
    assert_eq!((status, error_code(&bytes)), (StatusCode::SERVICE_UNAVAILABLE, ErrorCode::ModelNotLoaded));
    let (status, bytes) = call(&app, Method::POST, "/v1/score/realization", Some(json!({"generated": "x", "future": "y"}))).await;
    assert_eq!((status, error_code(&bytes)), (StatusCode::SERVICE_UNAVAILABLE, ErrorCode::IdfNotLoaded));
    let (status, bytes) = call(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: HealthResponse = json_of(&bytes);
    assert!(!h.model_loaded && !h.idf_loaded && h.injection_mode.is_none());
}

#[tokio::test]
async fn unknown_ids_and_routes() {
    let app = router(state(), None);
    for (method, uri, body) in [
        (Method::GET, "/v1/sessions/nope", None),
        (Method::POST, "/v1/sessions/nope/generate", Some(json!({"max_tokens": 1}))),
        (Method::PUT, "/v1/sessions/nope/future", Some(json!({"future": FUTURE, "distance": 1}))),
        (Method::GET, "/v2/elsewhere", None),
    ] {
        let (status, bytes) = call(&app, method, uri, body).await;
        assert_eq!((status, error_code(&bytes)), (StatusCode::NOT_FOUND, ErrorCode::NotFound), "{uri}");
    }
}

#[tokio::test]
async fn same_seed_sessions_agree() {
    let app = router(state(), None);
    let a = create(&app, session_body(5)).await;
    let b = create(&app, session_body(5)).await;
    assert_ne!(a, b);
    let (ta, _) = generate(&app, &a, 6).await;
    let (tb, _) = generate(&app, &b, 6).await;
    assert_eq!(ta[0], tb[0]);
    assert_eq!(ta, tb);
}

#[tokio::test]
async fn zero_tokens_is_immediate_done() {
    let app = router(state(), None);
    let id = create(&app, session_body(1)).await;
    let (tokens, done) = generate(&app, &id, 0).await;
    assert!(tokens.is_empty());
    assert_eq!(done, DoneEvent { stop_reason: StopReason::Budget, generated: 0, total_tokens: 0 });
}

#[tokio::test]
async fn stream_matches_transcript_and_library() {
    let app = router(state(), None);
    let sampling = SamplingParams { seed: 11, temperature: 1.3, ..SamplingParams::default() };
    let id = create(&app, json!({"context": CONTEXT, "future": FUTURE, "distance": 2, "sampling": sampling})).await;
    let (first, done1) = generate(&app, &id, 7).await;
    let (second, done2) = generate(&app, &id, 5).await;
    assert_eq!((done1.generated, done1.total_tokens), (first.len(), first.len()));
    assert_eq!(done2.total_tokens, first.len() + second.len());
    let streamed: String = first.iter().chain(&second).map(|t| t.piece.as_str()).collect();
    let ids: Vec<u32> = first.iter().chain(&second).map(|t| t.token_id).collect();
    let indices: Vec<usize> = first.iter().chain(&second).map(|t| t.index).collect();
    assert_eq!(indices, (0..ids.len()).collect::<Vec<_>>());

    let t = transcript(&app, &id).await;
    assert_eq!(t.generated_text, streamed);
    assert_eq!(t.generated_ids, ids);

    let engine = common::engine(InjectionMode::Memory);
    let (_, direct) = generate_once(&engine, CONTEXT, FUTURE, 2, sampling, GenerationBudget::Tokens(ids.len())).unwrap();
    assert_eq!(direct.tokens, ids);
    assert_eq!(direct.text, streamed);
}

#[tokio::test]
async fn swap_future_records_history() {
    let app = router(state(), None);
    let id = create(&app, session_body(2)).await;
    generate(&app, &id, 5).await;
    let before = transcript(&app, &id).await;
    let (status, bytes) = swap(&app, &id, "The nurse counted the bandages twice.", 1).await;
    assert_eq!(status, StatusCode::OK);
    let r: SetFutureResponse = json_of(&bytes);
    assert!(r.ok && r.recompute_ms >= 0.0);
    generate(&app, &id, 4).await;
    let after = transcript(&app, &id).await;
    assert!(after.generated_text.starts_with(&before.generated_text));
    assert_eq!(after.generated_ids[..5], before.generated_ids[..]);
    assert_eq!(after.futures.len(), 2);
    assert_eq!(after.futures[1].token_offset, 5);
    assert_eq!(after.futures[1].char_offset, before.generated_text.chars().count());
    assert_eq!((after.futures[1].future.as_str(), after.futures[1].distance), ("The nurse counted the bandages twice.", 1));
    assert_eq!(after.active_future.distance, 1);

    let (status, bytes) = swap(&app, &id, "", 1).await;
    assert_eq!((status, error_code(&bytes)), (StatusCode::BAD_REQUEST, ErrorCode::EmptyFuture));
    assert_eq!(transcript(&app, &id).await.futures.len(), 2);
}

#[tokio::test]
async fn idempotent_swap_keeps_distribution() {
    let app = router(state(), None);
    let a = create(&app, session_body(9)).await;
    let b = create(&app, session_body(9)).await;
    generate(&app, &a, 3).await;
    generate(&app, &b, 3).await;
    let (status, _) = swap(&app, &b, FUTURE, 3).await;
    assert_eq!(status, StatusCode::OK);
    let (ta, _) = generate(&app, &a, 8).await;
    let (tb, _) = generate(&app, &b, 8).await;
    assert_eq!(ta, tb);
}

#[tokio::test]
async fn busy_session_conflicts_and_disconnect_keeps_prefix() {
    let app = router(state(), None);
    let sampling = json!({"seed": 4, "max_new_tokens": 80});
    let id = create(&app, json!({"context": CONTEXT, "future": FUTURE, "distance": 2, "sampling": sampling})).await;
    let req = Request::post(format!("/v1/sessions/{id}/generate"))
        .header("content-type", "application/json")
        .body(Body::from(json!({"max_tokens": 70}).to_string()))
        .unwrap();
    let mut resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let first = resp.body_mut().frame().await.unwrap().unwrap().into_data().unwrap();
    let received = parse_sse(&first);
    assert!(matches!(received[0], Sse::Token(_)));

    let (status, bytes) = call(&app, Method::POST, &format!("/v1/sessions/{id}/generate"), Some(json!({"max_tokens": 1}))).await;
    assert_eq!((status, error_code(&bytes)), (StatusCode::CONFLICT, ErrorCode::SessionBusy));
    let (status, bytes) = swap(&app, &id, "A new dawn.", 1).await;
    assert_eq!((status, error_code(&bytes)), (StatusCode::CONFLICT, ErrorCode::SessionBusy));

    drop(resp);
    let mut free = false;
    for _ in 0..200 {
        tokio::time::sleep(Duration::from_millis(10)).await;
        let (status, _) = swap(&app, &id, FUTURE, 2).await;
        if status == StatusCode::OK {
            free = true;
            break;
        }
    }
    assert!(free, "session stayed busy after disconnect");
    let t = transcript(&app, &id).await;
    let committed = t.generated_ids.len();
    assert!(committed >= received.len() && committed < 70);
    assert_eq!(t.futures.last().unwrap().token_offset, committed);

    let (more, done) = generate(&app, &id, 3).await;
    assert_eq!(more[0].index, committed);
    assert_eq!(done.total_tokens, committed + more.len());
    assert!(transcript(&app, &id).await.generated_text.starts_with(&t.generated_text));
}

#[tokio::test]
async fn realization_endpoint() {
    let app = router(state(), None);
    let (status, bytes) = call(&app, Method::POST, "/v1/score/realization", Some(json!({"generated": format!("Intro. {FUTURE}"), "future": FUTURE}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of::<ScoreResponse>(&bytes).score, Some(1.0));
    let (_, bytes) = call(&app, Method::POST, "/v1/score/realization", Some(json!({"generated": "anything", "future": "the a"}))).await;
    assert_eq!(json_of::<Value>(&bytes), json!({"score": null}));
}

#[tokio::test]
async fn idle_sessions_expire() {
    let state = AppState::new(Some(common::engine(InjectionMode::Memory)), None, Duration::from_millis(50));
    let app = router(state.clone(), None);
    let id = create(&app, session_body(1)).await;
    assert_eq!(state.session_count(), 1);
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test]
async fn error_codes_are_closed_set() {
    let names: Vec<String> = ErrorCode::ALL.iter().map(|c| serde_json::to_value(c).unwrap().as_str().unwrap().to_string()).collect();
    assert_eq!(
        names,
        ["MODEL_NOT_LOADED", "IDF_NOT_LOADED", "CONTEXT_TOO_LONG", "EMPTY_FUTURE", "INVALID_REQUEST", "NOT_FOUND", "SESSION_BUSY", "INTERNAL"]
    );
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/api.md")).unwrap();
    for n in &names {
        assert!(doc.contains(&format!("`{n}`")), "{n} undocumented");
    }
}

#[tokio::test]
async fn static_files_are_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>ok</h1>").unwrap();
    let app = router(state(), Some(dir.path().to_path_buf()));
    let (status, bytes) = call(&app, Method::GET, "/index.html", None).await;
    assert_eq!((status, bytes.as_slice()), (StatusCode::OK, b"<h1>ok</h1>".as_slice()));
    let (status, _) = call(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
}

async fn script(app: &Router, id: &str, k: usize) -> TranscriptResponse {
    for round in 0..3 {
        generate(app, id, 2 + (k + round) % 3).await;
        if (k + round) % 2 == 0 {
            let (status, _) = swap(app, id, &format!("The fox number {k} ran home."), 1 + (k + round) % 4).await;
            assert_eq!(status, StatusCode::OK);
        }
    }
    transcript(app, id).await
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interleaved_sessions_match_serial() {
    let serial_app = router(state(), None);
    let mut serial = Vec::new();
    for k in 0..8 {
        let id = create(&serial_app, session_body(100 + k as u64)).await;
        let mut t = script(&serial_app, &id, k).await;
        t.id.clear();
        serial.push(t);
    }

    let app = router(state(), None);
    let mut ids = Vec::new();
    for k in 0..8 {
        ids.push(create(&app, session_body(100 + k as u64)).await);
    }
    let handles: Vec<_> = ids
        .into_iter()
        .enumerate()
        .map(|(k, id)| {
            let app = app.clone();
            tokio::spawn(async move { script(&app, &id, k).await })
        })
        .collect();
    for (k, h) in handles.into_iter().enumerate() {
        let mut t = h.await.unwrap();
        t.id.clear();
        assert_eq!(t, serial[k], "session {k}");
    }
}
