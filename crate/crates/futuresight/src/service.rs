//! HTTP service: sessions, streamed generation over server-sent events,
//! future swapping and realization scoring. All state is in memory.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::Stream;
use futuresight_core::corpus::IdfTable;
use futuresight_core::evaluation::realization_score;
use futuresight_core::generation::{create_session, Engine, FutureEntry, SamplingParams, Session, StepOutput, StopReason};
use futuresight_core::model::InjectionMode;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

/// Machine-readable error codes. The set is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    ModelNotLoaded,
    IdfNotLoaded,
    ContextTooLong,
    EmptyFuture,
    InvalidRequest,
    NotFound,
    SessionBusy,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 8] = [
        ErrorCode::ModelNotLoaded,
        ErrorCode::IdfNotLoaded,
        ErrorCode::ContextTooLong,
        ErrorCode::EmptyFuture,
        ErrorCode::InvalidRequest,
        ErrorCode::NotFound,
        ErrorCode::SessionBusy,
        ErrorCode::Internal,
    ];

    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::ModelNotLoaded | ErrorCode::IdfNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::ContextTooLong | ErrorCode::EmptyFuture | ErrorCode::InvalidRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::SessionBusy => StatusCode::CONFLICT,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into() }
    }
}

impl From<futuresight_core::Error> for ApiError {
    fn from(e: futuresight_core::Error) -> Self {
        use futuresight_core::Error as E;
        let code = match &e {
            E::EmptyFuture => ErrorCode::EmptyFuture,
            E::SequenceTooLong { .. } => ErrorCode::ContextTooLong,
            E::Invalid(_) | E::ModeMismatch(_) | E::UnknownToken { .. } => ErrorCode::InvalidRequest,
            _ => ErrorCode::Internal,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(ErrorCode::InvalidRequest, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub context: String,
    pub future: String,
    pub distance: usize,
    #[serde(default)]
    pub sampling: SamplingParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub max_tokens: usize,
}

/// Data of a `token` event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEvent {
    /// Zero-based position in the session's generated tokens.
    pub index: usize,
    pub token_id: u32,
    pub piece: String,
}

/// Data of the terminal `done` event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoneEvent {
    pub stop_reason: StopReason,
    /// Tokens committed by this request.
    pub generated: usize,
    /// Tokens committed by the session in total.
    pub total_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetFutureRequest {
    pub future: String,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetFutureResponse {
    pub ok: bool,
    pub recompute_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveFuture {
    pub future: String,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptResponse {
    pub id: String,
    pub context: String,
    pub generated_text: String,
    pub generated_ids: Vec<u32>,
    pub futures: Vec<FutureEntry>,
    pub active_future: ActiveFuture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub generated: String,
    pub future: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_loaded: bool,
    pub idf_loaded: bool,
    pub injection_mode: Option<InjectionMode>,
    pub sessions: usize,
}

struct Slot {
    session: Mutex<Session>,
    busy: AtomicBool,
    last_activity: Mutex<Instant>,
}

impl Slot {
    fn touch(&self) {
        *self.last_activity.lock().unwrap() = Instant::now();
    }
}

/// Clears the busy flag when dropped.
struct BusyGuard(Arc<Slot>);

impl BusyGuard {
    fn acquire(slot: Arc<Slot>) -> ApiResult<Self> {
        if slot.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
            return Err(ApiError::new(ErrorCode::SessionBusy, "session is busy"));
        }
        Ok(BusyGuard(slot))
    }
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.touch();
        self.0.busy.store(false, Ordering::Release);
    }
}

struct Inner {
    engine: Option<Engine>,
    idf: Option<IdfTable>,
    ttl: Duration,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    counter: AtomicU64,
}

/// Shared service state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(engine: Option<Engine>, idf: Option<IdfTable>, ttl: Duration) -> Self {
        AppState(Arc::new(Inner {
            engine,
            idf,
            ttl,
            sessions: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        }))
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.lock().unwrap().len()
    }

    /// Drops idle sessions older than the TTL; busy sessions are kept.
    pub fn evict_idle(&self) -> usize {
        let ttl = self.0.ttl;
        let mut sessions = self.0.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, s| s.busy.load(Ordering::Acquire) || s.last_activity.lock().unwrap().elapsed() < ttl);
        before - sessions.len()
    }

    fn engine(&self) -> ApiResult<&Engine> {
        self.0
            .engine
            .as_ref()
            .ok_or_else(|| ApiError::new(ErrorCode::ModelNotLoaded, "no model checkpoint is loaded"))
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.evict_idle();
        let slot = self
            .0
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no session {id}")))?;
        slot.touch();
        Ok(slot)
    }

    fn next_id(&self) -> String {
        let n = self.0.counter.fetch_add(1, Ordering::Relaxed) + 1;
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.subsec_nanos());
        format!("s{n:06}-{nanos:08x}")
    }
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(transcript))
        .route("/v1/sessions/{id}/generate", post(generate))
        .route("/v1/sessions/{id}/future", put(set_future))
        .route("/v1/score/realization", post(score))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such route") }),
    }
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    state.evict_idle();
    Json(HealthResponse {
        status: "ok".into(),
        model_loaded: state.0.engine.is_some(),
        idf_loaded: state.0.idf.is_some(),
        injection_mode: state.0.engine.as_ref().map(|e| e.model.config().injection_mode),
        sessions: state.session_count(),
    })
}

fn check_distance(distance: usize) -> ApiResult<()> {
    if distance == 0 {
        return Err(ApiError::new(ErrorCode::InvalidRequest, "distance must be at least 1"));
    }
    Ok(())
}

async fn create(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<CreateSessionResponse>)> {
    state.engine()?;
    let Json(req) = body?;
    check_distance(req.distance)?;
    let task_state = state.clone();
    let session = tokio::task::spawn_blocking(move || {
        let engine = task_state.engine()?;
        create_session(engine, &req.context, &req.future, req.distance, req.sampling).map_err(ApiError::from)
    })
    .await
    .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))??;
    state.evict_idle();
    let id = state.next_id();
    let slot = Arc::new(Slot {
        session: Mutex::new(session),
        busy: AtomicBool::new(false),
        last_activity: Mutex::new(Instant::now()),
    });
    state.0.sessions.lock().unwrap().insert(id.clone(), slot);
    Ok((StatusCode::CREATED, Json(CreateSessionResponse { id })))
}

async fn transcript(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TranscriptResponse>> {
    let slot = state.slot(&id)?;
    let session = slot.session.lock().unwrap();
    let t = session.transcript();
    let (future, distance) = session.future();
    Ok(Json(TranscriptResponse {
        id,
        context: t.context,
        generated_text: t.generated_text,
        generated_ids: t.generated_ids,
        futures: t.futures,
        active_future: ActiveFuture {
            future: future.into(),
            distance,
        },
    }))
}

enum Streamed {
    Token(TokenEvent),
    Done(DoneEvent),
    Failed(ApiError),
}

impl Streamed {
    fn event(&self) -> Event {
        let (name, data) = match self {
            Streamed::Token(t) => ("token", serde_json::to_string(t)),
            Streamed::Done(d) => ("done", serde_json::to_string(d)),
            Streamed::Failed(e) => ("error", serde_json::to_string(e)),
        };
        Event::default().event(name).data(data.expect("event serializes"))
    }
}

/// Steps the session on a blocking thread. Tokens are committed before they are
/// sent, so a dropped receiver leaves the session at its last committed token.
fn run_generation(state: AppState, guard: BusyGuard, max_tokens: usize, tx: mpsc::Sender<Streamed>) {
    let Ok(engine) = state.engine() else { return };
    let mut session = guard.0.session.lock().unwrap();
    let mut produced = 0;
    let outcome = loop {
        if produced >= max_tokens {
            break Ok(StopReason::Budget);
        }
        match session.step(engine) {
            Ok(StepOutput::Token { id, piece }) => {
                produced += 1;
                let ev = TokenEvent {
                    index: session.generated_ids().len() - 1,
                    token_id: id,
                    piece,
                };
                if tx.blocking_send(Streamed::Token(ev)).is_err() {
                    return;
                }
            }
            Ok(StepOutput::End(reason)) => break Ok(reason),
            Err(e) => break Err(ApiError::from(e)),
        }
    };
    let total_tokens = session.generated_ids().len();
    drop(session);
    let last = match outcome {
        Ok(stop_reason) => Streamed::Done(DoneEvent {
            stop_reason,
            generated: produced,
            total_tokens,
        }),
        Err(e) => Streamed::Failed(e),
    };
    let _ = tx.blocking_send(last);
    drop(guard);
}

async fn generate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    state.engine()?;
    let slot = state.slot(&id)?;
    let Json(req) = body?;
    let guard = BusyGuard::acquire(slot)?;
    let (tx, rx) = mpsc::channel(16);
    let task_state = state.clone();
    tokio::task::spawn_blocking(move || run_generation(task_state, guard, req.max_tokens, tx));
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let item = rx.recv().await?;
        Some((Ok(item.event()), rx))
    });
    Ok(Sse::new(stream))
}

async fn set_future(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<SetFutureRequest>, JsonRejection>,
) -> ApiResult<Json<SetFutureResponse>> {
    state.engine()?;
    let slot = state.slot(&id)?;
    let Json(req) = body?;
    check_distance(req.distance)?;
    let guard = BusyGuard::acquire(slot)?;
    let task_state = state.clone();
    let recompute_ms = tokio::task::spawn_blocking(move || -> ApiResult<f64> {
        let engine = task_state.engine()?;
        let mut session = guard.0.session.lock().unwrap();
        let t0 = Instant::now();
        session.set_future(engine, &req.future, req.distance)?;
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    })
    .await
    .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))??;
    Ok(Json(SetFutureResponse { ok: true, recompute_ms }))
}

async fn score(State(state): State<AppState>, body: Result<Json<ScoreRequest>, JsonRejection>) -> ApiResult<Json<ScoreResponse>> {
    let table = state
        .0
        .idf
        .as_ref()
        .ok_or_else(|| ApiError::new(ErrorCode::IdfNotLoaded, "no IDF table is loaded"))?;
    let Json(req) = body?;
    Ok(Json(ScoreResponse {
        score: realization_score(&req.generated, &req.future, table),
    }))
}

/// Binds `addr` and serves until the process ends, sweeping idle sessions periodically.
pub async fn serve(state: AppState, addr: std::net::SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let sweep = state.clone();
    let period = (state.0.ttl / 2).clamp(Duration::from_millis(100), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweep.evict_idle();
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, static_dir)).await
}
