//! HTTP session service.
//!
//! JSON API over the consultation engine:
//!
//! - `POST /sessions` `{opening, config?}` → 201 with the first question
//! - `POST /sessions/{id}/answer` `{response, turn?}` → next question or diagnosis
//! - `GET /sessions/{id}/trace` → full transcript
//! - `GET /healthz` → `ok`
//!
//! Sessions live in memory and are serialized per session: a second request
//! that arrives while one is in flight gets 409 instead of queueing. Engine
//! calls are blocking and run on the blocking pool. Finished sessions are
//! written through to the transcript directory so their trace survives a
//! restart. Idle sessions expire after a TTL and answer 410 afterwards.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use patience_core::backend::{self, Backend};
use patience_core::engine::{AskedQuestion, EngineError, SelectionReport, Status};
use patience_core::prob::SelectionMode;
use patience_core::transcript::Transcript;
use patience_core::{Diagnosis, DialogueState, Engine, KnowledgeBase, Outcome, SessionConfig};

pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid CORS origin `{0}`")]
    Origin(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Session defaults; `kb_path` and `backend` are fixed for the process.
    pub session: SessionConfig,
    /// Where finished transcripts are written. `None` keeps them in memory only.
    pub transcript_dir: Option<PathBuf>,
    pub ttl: Duration,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
    /// Static chat client served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(session: SessionConfig) -> Self {
        Self { session, transcript_dir: None, ttl: DEFAULT_TTL, cors_origins: Vec::new(), ui_dir: None }
    }
}

struct Session {
    engine: Arc<Engine>,
    state: DialogueState,
    last_active: Instant,
}

type Slot = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    kb: Arc<KnowledgeBase>,
    backend: Arc<dyn Backend>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Slot>>,
    expired: Mutex<HashSet<String>>,
}

impl AppState {
    /// Loads the knowledge base and connects the backend named in the
    /// session config.
    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.session.validate()?;
        let path = config.session.kb_path.as_ref().ok_or(EngineError::NoKbPath)?;
        let kb = Arc::new(KnowledgeBase::ingest(path).map_err(EngineError::from)?);
        let backend = backend::connect(&config.session.backend).map_err(EngineError::from)?;
        Ok(Self::new(kb, backend, config))
    }

    pub fn new(kb: Arc<KnowledgeBase>, backend: Arc<dyn Backend>, config: ServiceConfig) -> Self {
        Self {
            kb,
            backend,
            config,
            sessions: Mutex::new(HashMap::new()),
            expired: Mutex::new(HashSet::new()),
        }
    }

    fn slot(&self, id: &str) -> Option<Slot> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn is_expired(&self, id: &str) -> bool {
        self.expired.lock().unwrap_or_else(|e| e.into_inner()).contains(id)
    }

    /// Drops sessions idle for longer than the TTL, remembering their ids.
    /// Sessions currently locked by a request are busy, not idle.
    fn sweep(&self) {
        let ttl = self.config.ttl;
        let mut sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        let stale: Vec<String> = sessions
            .iter()
            .filter(|(_, slot)| slot.try_lock().is_ok_and(|s| s.last_active.elapsed() > ttl))
            .map(|(id, _)| id.clone())
            .collect();
        if stale.is_empty() {
            return;
        }
        let mut expired = self.expired.lock().unwrap_or_else(|e| e.into_inner());
        for id in stale {
            log::info!("session {id} expired");
            sessions.remove(&id);
            expired.insert(id);
        }
    }

    fn transcript_path(&self, id: &str) -> Option<PathBuf> {
        // Ids are server-issued UUIDs; anything else never touches the disk.
        uuid::Uuid::parse_str(id).ok()?;
        Some(self.config.transcript_dir.as_ref()?.join(format!("{id}.json")))
    }
}

/// Per-session overrides accepted at creation. `null` disables a threshold.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub k: Option<usize>,
    pub l_max: Option<usize>,
    pub max_turns: Option<usize>,
    #[serde(default, deserialize_with = "present")]
    pub stop_entropy: Option<Option<f64>>,
    #[serde(default, deserialize_with = "present")]
    pub stop_top1: Option<Option<f64>>,
    pub stop_on_uninformative: Option<bool>,
    pub selection_mode: Option<SelectionMode>,
    pub humanize: Option<bool>,
}

/// Distinguishes an explicit `null` (`Some(None)`) from an absent field.
fn present<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Option<Option<T>>, D::Error> {
    Option::<T>::deserialize(d).map(Some)
}

impl ConfigOverrides {
    fn apply(&self, base: &SessionConfig) -> SessionConfig {
        let mut c = base.clone();
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.l_max {
            c.l_max = v;
        }
        if let Some(v) = self.max_turns {
            c.max_turns = v;
        }
        if let Some(v) = self.stop_entropy {
            c.stop_entropy = v;
        }
        if let Some(v) = self.stop_top1 {
            c.stop_top1 = v;
        }
        if let Some(v) = self.stop_on_uninformative {
            c.stop_on_uninformative = v;
        }
        if let Some(v) = self.selection_mode {
            c.selection_mode = v;
        }
        if let Some(v) = self.humanize {
            c.humanize = v;
        }
        c
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub opening: String,
    #[serde(default)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub response: String,
    /// Iteration the client is answering; a stale value gets 409.
    pub turn: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry {
    pub id: String,
    pub name: String,
    pub p: f64,
}

/// Snapshot returned after every transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPayload {
    pub session_id: String,
    pub status: Status,
    pub iteration: usize,
    pub question: Option<AskedQuestion>,
    pub diagnosis: Option<Diagnosis>,
    /// Sorted by descending probability.
    pub distribution: Vec<DistributionEntry>,
    pub other: f64,
    pub entropy: f64,
    pub entropy_trace: Vec<f64>,
    /// Report for the question just selected, if any.
    pub selection: Option<SelectionReport>,
}

fn payload(id: &str, kb: &KnowledgeBase, state: &DialogueState, outcome: &Outcome) -> TurnPayload {
    let dist = state.current_distribution().expect("state has a distribution after start");
    let (question, diagnosis, selection) = match outcome {
        Outcome::Question(q) => (Some(q.clone()), None, state.selection_reports.last().cloned()),
        Outcome::Diagnosis(d) => (None, Some(d.clone()), None),
    };
    TurnPayload {
        session_id: id.to_string(),
        status: state.status,
        iteration: state.iteration,
        question,
        diagnosis,
        distribution: dist
            .entries()
            .iter()
            .map(|e| DistributionEntry {
                id: e.id.clone(),
                name: kb.disease(&e.id).map_or_else(|| e.id.clone(), |d| d.name.clone()),
                p: e.p,
            })
            .collect(),
        other: dist.other_mass(),
        entropy: state.current_entropy().unwrap_or_default(),
        entropy_trace: state.entropy_trace.clone(),
        selection,
    }
}

/// Error body: `{"error": message}`.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::EmptyOpening | EngineError::EmptyResponse | EngineError::InvalidConfig(_) => {
                StatusCode::BAD_REQUEST
            }
            EngineError::NotActive(_) => StatusCode::CONFLICT,
            EngineError::Backend(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.body_text())
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("no session `{id}`"))
}

fn gone(id: &str) -> ApiError {
    ApiError(StatusCode::GONE, format!("session `{id}` expired"))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))
}

async fn persist(app: &AppState, id: &str, transcript: Transcript) {
    let Some(path) = app.transcript_path(id) else {
        return;
    };
    let id = id.to_string();
    let written = tokio::task::spawn_blocking(move || transcript.write(&path)).await;
    match written {
        Ok(Ok(())) => {}
        Ok(Err(e)) => log::error!("session {id}: transcript not written: {e}"),
        Err(e) => log::error!("session {id}: transcript writer failed: {e}"),
    }
}

async fn create(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<TurnPayload>), ApiError> {
    let Json(req) = body?;
    app.sweep();
    let config = req.config.apply(&app.config.session);
    let engine = Arc::new(Engine::new(app.kb.clone(), app.backend.clone(), config)?);
    let id = uuid::Uuid::new_v4().to_string();
    let (state, outcome) = {
        let engine = engine.clone();
        let label = id.clone();
        blocking(move || engine.start_with(&req.opening, Default::default(), &label)).await??
    };
    let body = payload(&id, &app.kb, &state, &outcome);
    if state.status != Status::Active {
        persist(&app, &id, engine.trace(&state)).await;
    }
    let session = Session { engine, state, last_active: Instant::now() };
    app.sessions
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    log::info!("session {id} created");
    Ok((StatusCode::CREATED, Json(body)))
}

async fn answer(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<TurnPayload>, ApiError> {
    let Json(req) = body?;
    app.sweep();
    let Some(slot) = app.slot(&id) else {
        return Err(if app.is_expired(&id) { gone(&id) } else { not_found(&id) });
    };
    let Ok(mut session) = slot.try_lock_owned() else {
        return Err(ApiError(StatusCode::CONFLICT, format!("session `{id}` is busy with another answer")));
    };
    if session.state.status != Status::Active {
        return Err(EngineError::NotActive(session.state.status).into());
    }
    if let Some(turn) = req.turn {
        if turn != session.state.iteration {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("turn {turn} already answered; session is at turn {}", session.state.iteration),
            ));
        }
    }
    session.last_active = Instant::now();
    let engine = session.engine.clone();
    let mut state = session.state.clone();
    let (state, outcome) =
        blocking(move || engine.step(&mut state, &req.response).map(|o| (state, o))).await??;
    let body = payload(&id, &app.kb, &state, &outcome);
    if state.status != Status::Active {
        persist(&app, &id, session.engine.trace(&state)).await;
    }
    session.state = state;
    session.last_active = Instant::now();
    Ok(Json(body))
}

async fn trace(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Transcript>, ApiError> {
    app.sweep();
    if let Some(slot) = app.slot(&id) {
        let session = slot.lock().await;
        return Ok(Json(session.engine.trace(&session.state)));
    }
    if let Some(path) = app.transcript_path(&id).filter(|p| p.exists()) {
        let t = blocking(move || Transcript::read(&path))
            .await?
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        return Ok(Json(t));
    }
    Err(if app.is_expired(&id) { gone(&id) } else { not_found(&id) })
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(app: Arc<AppState>) -> Result<Router, ServiceError> {
    let cors = if app.config.cors_origins.is_empty() {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins = app
            .config
            .cors_origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| ServiceError::Origin(o.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        CorsLayer::new().allow_origin(origins)
    }
    .allow_methods(Any)
    .allow_headers(Any);
    let mut router = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/trace", get(trace));
    if let Some(dir) = &app.config.ui_dir {
        router = router.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    Ok(router.layer(cors).with_state(app))
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> Result<(), ServiceError> {
    if let Some(dir) = &app.config.transcript_dir {
        std::fs::create_dir_all(dir)?;
    }
    let router = router(app)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
