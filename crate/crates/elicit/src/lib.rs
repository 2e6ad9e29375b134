//! Live expert-elicitation sessions over HTTP.
//!
//! A session wraps an [`ExpertSession`]: the service pins one query at a
//! time, records the expert's answer, refits the posterior, and exports the
//! full history so the session can be replayed offline. All routes live under
//! `/api/v1`; errors are `{"code", "message"}` with status 400, 404, or 409.
//!
//! | route | |
//! |---|---|
//! | `POST /sessions` | create from `sources` or a `world_ref` |
//! | `GET /sessions/{id}/query` | the pinned query, selected on first call |
//! | `POST /sessions/{id}/answer` | `{query_index, choice: "i" \| "j"}` |
//! | `GET /sessions/{id}/posterior` | mean, sd, status, 2-D projection |
//! | `GET /sessions/{id}/export` | history and posterior for replay |
//! | `POST /sessions/{id}/abort` | stop a session |
//!
//! Every state change is appended to an optional JSONL event log.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use metacausal::embedding::EmbeddingSet;
use metacausal::expert::{self, Acquisition, ExpertSession, PendingQuery};
use metacausal::taskgen::{self, GeneratorSpec, TaskEmbedding};

pub mod client;
pub mod pca;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Exhausted,
    Aborted,
}

#[derive(Clone, Debug)]
pub struct SessionRecord {
    pub session_id: String,
    pub session: ExpertSession,
    pub pending: Option<PendingQuery>,
    pub status: Status,
    pub created_at: u64,
    pub sources_ref: Option<String>,
    pub task_metadata: Option<Value>,
    /// Known true embedding, for RMSE traces in demos and tests.
    pub z_true: Option<TaskEmbedding>,
    /// Posterior mean after each answer, starting at the prior.
    pub mean_trace: Vec<TaskEmbedding>,
}

impl SessionRecord {
    fn rmse_trace(&self) -> Option<Vec<f64>> {
        let z = self.z_true.as_ref()?;
        self.mean_trace.iter().map(|m| expert::rmse(m, z).ok()).collect()
    }
}

/// A JSON error body with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<metacausal::Error> for ApiError {
    fn from(e: metacausal::Error) -> Self {
        match e {
            metacausal::Error::Numerical(m) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numerical", m),
            other => Self::bad_request(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared service state: sessions behind per-session locks, named source
/// sets, and the event log.
#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
    worlds: HashMap<String, EmbeddingSet>,
    log: Option<Mutex<BufWriter<File>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a source set that `world_ref` can name.
    pub fn with_world(mut self, name: impl Into<String>, sources: EmbeddingSet) -> Self {
        self.worlds.insert(name.into(), sources);
        self
    }

    /// Appends events to `path`, creating it if needed.
    pub fn with_event_log(mut self, path: &Path) -> io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(BufWriter::new(f)));
        Ok(self)
    }

    fn event(&self, session_id: &str, event: &str, data: Value) {
        let Some(log) = &self.log else { return };
        let line = json!({"ts": now_ms(), "session_id": session_id, "event": event, "data": data});
        let mut w = log.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            log::warn!("event log write failed: {e}");
        }
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<SessionRecord>>> {
        let map = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        map.get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session '{id}'")))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).len()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn lock(rec: &Mutex<SessionRecord>) -> std::sync::MutexGuard<'_, SessionRecord> {
    rec.lock().unwrap_or_else(|p| p.into_inner())
}

/// Body of `POST /sessions`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub sources: Option<EmbeddingSet>,
    /// A registered name, or `synthetic:<seed>` for the default generator.
    pub world_ref: Option<String>,
    pub budget: usize,
    #[serde(default = "default_acquisition")]
    pub acquisition: Acquisition,
    #[serde(default)]
    pub seed: u64,
    pub task_metadata: Option<Value>,
    pub z_true: Option<Vec<f64>>,
    /// With a synthetic `world_ref`, attaches that target's true embedding.
    pub target_shift: Option<f64>,
}

fn default_acquisition() -> Acquisition {
    Acquisition::Bald
}

fn resolve_sources(state: &AppState, body: &CreateSession) -> ApiResult<(EmbeddingSet, Option<TaskEmbedding>)> {
    match (&body.sources, &body.world_ref) {
        (Some(s), None) => {
            if body.target_shift.is_some() {
                return Err(ApiError::bad_request("target_shift needs a synthetic world_ref"));
            }
            Ok((s.clone(), None))
        }
        (None, Some(r)) => {
            if let Some(set) = state.worlds.get(r) {
                return Ok((set.clone(), None));
            }
            let seed: u64 = r
                .strip_prefix("synthetic:")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ApiError::bad_request(format!("unknown world_ref '{r}'")))?;
            let spec = GeneratorSpec::with_defaults(seed);
            let shifts = taskgen::DEFAULT_SHIFT_LEVELS;
            let world = taskgen::generate_experiment_world(&spec, 20, &shifts)?;
            let z = match body.target_shift {
                Some(s) => Some(
                    world
                        .target_at(s)
                        .ok_or_else(|| ApiError::bad_request(format!("no target at shift {s}")))?
                        .embedding_true
                        .clone(),
                ),
                None => None,
            };
            Ok((EmbeddingSet::oracle(&world.sources)?, z))
        }
        _ => Err(ApiError::bad_request("give exactly one of sources and world_ref")),
    }
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    b.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn create_session(State(st): State<Arc<AppState>>, b: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let b = body(b)?;
    let (sources, z_world) = resolve_sources(&st, &b)?;
    let session = ExpertSession::new(sources, b.budget, b.acquisition, b.seed)?;
    let z_true = match (b.z_true.clone(), z_world) {
        (Some(z), _) => {
            if z.len() != session.sources.dim() {
                return Err(ApiError::bad_request(format!("z_true has dimension {}, sources have {}", z.len(), session.sources.dim())));
            }
            Some(TaskEmbedding::new(z))
        }
        (None, z) => z,
    };
    let id = uuid::Uuid::new_v4().to_string();
    let status = if session.is_exhausted() { Status::Exhausted } else { Status::Active };
    let rec = SessionRecord {
        session_id: id.clone(),
        mean_trace: vec![session.posterior_mean()],
        session,
        pending: None,
        status,
        created_at: now_ms(),
        sources_ref: b.world_ref.clone(),
        task_metadata: b.task_metadata.clone(),
        z_true,
    };
    st.event(&id, "create", json!({"budget": b.budget, "acquisition": b.acquisition, "seed": b.seed, "world_ref": b.world_ref}));
    st.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(id.clone(), Arc::new(Mutex::new(rec)));
    Ok((StatusCode::CREATED, Json(json!({"session_id": id, "status": status, "budget": b.budget}))))
}

fn query_json(p: &PendingQuery, remaining: usize) -> Value {
    json!({"query_index": p.query_index, "i": p.query.i, "j": p.query.j, "eig": p.eig, "remaining": remaining, "repeat": p.repeat})
}

async fn next_query(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let rec = st.session(&id)?;
    let mut r = lock(&rec);
    match r.status {
        Status::Aborted => return Err(ApiError::conflict("aborted", "session was aborted")),
        Status::Exhausted => return Err(ApiError::conflict("budget_exhausted", "query budget exhausted")),
        Status::Active => {}
    }
    if let Some(p) = &r.pending {
        return Ok(Json(query_json(p, r.session.remaining())));
    }
    let p = r.session.select_query()?;
    st.event(&id, "query", query_json(&p, r.session.remaining()));
    let out = query_json(&p, r.session.remaining());
    r.pending = Some(p);
    Ok(Json(out))
}

/// Body of `POST /sessions/{id}/answer`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerBody {
    pub query_index: usize,
    pub choice: String,
}

fn posterior_json(r: &SessionRecord) -> Value {
    json!({
        "posterior_mean": r.session.posterior.mean.as_slice(),
        "posterior_std": r.session.posterior.std().as_slice(),
        "remaining": r.session.remaining(),
        "status": r.status,
    })
}

async fn answer(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    b: Result<Json<AnswerBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let rec = st.session(&id)?;
    let b = body(b)?;
    let c = match b.choice.as_str() {
        "i" => 1,
        "j" => 0,
        other => return Err(ApiError::bad_request(format!("choice must be \"i\" or \"j\", got {other:?}"))),
    };
    let mut r = lock(&rec);
    let pending = match &r.pending {
        Some(p) if p.query_index == b.query_index => p.clone(),
        Some(p) => return Err(ApiError::conflict("stale_query", format!("query {} is pinned, got {}", p.query_index, b.query_index))),
        None => return Err(ApiError::conflict("stale_query", format!("no query is pinned for index {}", b.query_index))),
    };
    r.session.answer(&pending, c, now_ms())?;
    r.pending = None;
    let mean = r.session.posterior_mean();
    r.mean_trace.push(mean);
    if r.session.is_exhausted() {
        r.status = Status::Exhausted;
    }
    st.event(&id, "answer", json!({"query_index": b.query_index, "i": pending.query.i, "j": pending.query.j, "c": c}));
    Ok(Json(posterior_json(&r)))
}

async fn posterior(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let rec = st.session(&id)?;
    let r = lock(&rec);
    let mut v = posterior_json(&r);
    v["session_id"] = json!(r.session_id);
    v["history_len"] = json!(r.session.history.len());
    v["budget"] = json!(r.session.budget);
    v["created_at"] = json!(r.created_at);
    v["task_metadata"] = r.task_metadata.clone().unwrap_or(Value::Null);
    v["pending"] = r.pending.as_ref().map_or(Value::Null, |p| query_json(p, r.session.remaining()));
    v["projection"] = serde_json::to_value(pca::project(&r.session.sources, &r.session.posterior)).unwrap_or(Value::Null);
    if let Some(t) = r.rmse_trace() {
        v["rmse_trace"] = json!(t);
    }
    Ok(Json(v))
}

async fn export(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let rec = st.session(&id)?;
    let r = lock(&rec);
    let ex = r.session.export(r.sources_ref.clone(), r.rmse_trace());
    let bytes = metacausal::json::to_vec(&ex).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn abort(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let rec = st.session(&id)?;
    let mut r = lock(&rec);
    r.status = Status::Aborted;
    r.pending = None;
    st.event(&id, "abort", Value::Null);
    Ok(Json(posterior_json(&r)))
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/query", get(next_query))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/posterior", get(posterior))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/abort", post(abort));
    Router::new().nest("/api/v1", api).layer(CorsLayer::permissive()).with_state(state)
}

/// Serves until the process is interrupted.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// A server on its own runtime thread, for tests and embedding.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(addr: SocketAddr, state: Arc<AppState>) -> io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("server stopped: {e}");
                }
            })
        });
        Ok(BackgroundServer { addr, shutdown: Some(tx), thread: Some(thread) })
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
