//! HTTP preference elicitation: pair scheduling per session, durable answer log, live counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;
use vizpref_core::data::{append_preference, load_visualization_dir, open_log_for_append, read_preference_records};
use vizpref_core::{Choice, PreferenceRecord, Visualization};

const PLACEHOLDER_UI: &str = include_str!("../static/index.html");

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("every pair has already been shown in this session")]
    Exhausted,
    #[error("pair {0:?} was not issued to this session")]
    UnknownPair(String),
    #[error("pair {0:?} has already been answered")]
    AlreadyAnswered(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] vizpref_core::Error),
    #[error("log writer task failed: {0}")]
    Writer(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::Exhausted => "exhausted",
            ServiceError::UnknownPair(_) => "unknown_pair",
            ServiceError::AlreadyAnswered(_) => "already_answered",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Core(_) | ServiceError::Writer(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) | ServiceError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ServiceError::Exhausted => StatusCode::GONE,
            ServiceError::AlreadyAnswered(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(_) | ServiceError::Writer(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every non-2xx API response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisPayload {
    pub id: String,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPayload {
    pub pair_id: String,
    pub left: VisPayload,
    pub right: VisPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewSession {
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairQuery {
    pub session: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub session: String,
    pub pair_id: String,
    pub choice: Choice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

/// Counts over the preference log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub total_preferences: usize,
    pub trainable: usize,
    pub per_user: BTreeMap<String, usize>,
}

impl Stats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a PreferenceRecord>) -> Self {
        let mut stats = Stats::default();
        records.into_iter().for_each(|r| stats.add(r));
        stats
    }

    fn add(&mut self, r: &PreferenceRecord) {
        self.total_preferences += 1;
        if r.is_trainable() {
            self.trainable += 1;
        }
        *self.per_user.entry(r.user.clone()).or_default() += 1;
    }
}

#[derive(Debug)]
struct Issued {
    left: usize,
    right: usize,
    answered: bool,
}

#[derive(Debug)]
struct Session {
    user: String,
    #[allow(dead_code)]
    created: DateTime<Utc>,
    rng: ChaCha8Rng,
    shown: HashSet<(usize, usize)>,
    issued: HashMap<String, Issued>,
}

impl Session {
    /// Uniform draw among the unordered pairs not shown yet, returned in a random placement.
    fn draw(&mut self, n: usize) -> Option<(usize, usize)> {
        let total = n * (n - 1) / 2;
        let remaining = total - self.shown.len();
        if remaining == 0 {
            return None;
        }
        let pair = if self.shown.len() * 2 <= total {
            // Rejection on ordered draws; both orders of a pair are equally likely.
            loop {
                let i = self.rng.random_range(0..n);
                let j = self.rng.random_range(0..n);
                let p = (i.min(j), i.max(j));
                if i != j && !self.shown.contains(&p) {
                    break p;
                }
            }
        } else {
            let k = self.rng.random_range(0..remaining);
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|p| !self.shown.contains(p))
                .nth(k)
                .expect("remaining count matches the unshown pairs")
        };
        self.shown.insert(pair);
        Some(if self.rng.random_bool(0.5) { pair } else { (pair.1, pair.0) })
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub vis_dir: PathBuf,
    pub log_path: PathBuf,
    /// Directory with the built UI; a placeholder page is served at `/` otherwise.
    pub ui_dir: Option<PathBuf>,
    /// Fixes the pair schedule of every session; sessions draw fresh entropy when absent.
    pub seed: Option<u64>,
}

pub struct AppState {
    visualizations: Vec<VisPayload>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    writer: Mutex<File>,
    stats: RwLock<Stats>,
    seed: Option<u64>,
    created_sessions: AtomicU64,
}

impl AppState {
    pub fn load(config: &ServiceConfig) -> vizpref_core::Result<Self> {
        let vis = load_visualization_dir(&config.vis_dir)?;
        Self::new(vis.values(), &config.log_path, config.seed)
    }

    pub fn new<'a>(
        visualizations: impl IntoIterator<Item = &'a Visualization>,
        log_path: &Path,
        seed: Option<u64>,
    ) -> vizpref_core::Result<Self> {
        let visualizations: Vec<VisPayload> = visualizations
            .into_iter()
            .map(|v| VisPayload {
                id: v.id().to_string(),
                points: v.points().to_vec(),
                labels: v.labels().to_vec(),
            })
            .collect();
        if visualizations.len() < 2 {
            return Err(vizpref_core::Error::InvalidConfig(format!(
                "need at least 2 visualizations to form pairs, found {}",
                visualizations.len()
            )));
        }
        let stats = if log_path.exists() {
            let records = read_preference_records(log_path)?;
            let known: HashSet<&str> = visualizations.iter().map(|v| v.id.as_str()).collect();
            if let Some(r) = records
                .iter()
                .find(|r| !known.contains(r.left.as_str()) || !known.contains(r.right.as_str()))
            {
                log::warn!("existing log references visualizations outside the served set (e.g. {:?})", r.left);
            }
            Stats::from_records(&records)
        } else {
            Stats::default()
        };
        let writer = open_log_for_append(log_path)?;
        log::info!(
            "serving {} visualizations; log {} holds {} preferences",
            visualizations.len(),
            log_path.display(),
            stats.total_preferences
        );
        Ok(AppState {
            visualizations,
            sessions: Mutex::new(HashMap::new()),
            writer: Mutex::new(writer),
            stats: RwLock::new(stats),
            seed,
            created_sessions: AtomicU64::new(0),
        })
    }

    pub fn stats(&self) -> Stats {
        self.stats.read().expect("stats lock poisoned").clone()
    }

    pub fn create_session(&self, user: &str) -> Result<String, ServiceError> {
        let user = user.trim();
        if user.is_empty() {
            return Err(ServiceError::BadRequest("user label must not be empty".into()));
        }
        let ordinal = self.created_sessions.fetch_add(1, Ordering::Relaxed);
        let rng = match self.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed ^ ordinal.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            None => ChaCha8Rng::from_os_rng(),
        };
        let id = uuid::Uuid::new_v4().to_string();
        let session = Session {
            user: user.to_string(),
            created: Utc::now(),
            rng,
            shown: HashSet::new(),
            issued: HashMap::new(),
        };
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        log::info!("session {id} opened for {user:?}");
        Ok(id)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn next_pair(&self, session_id: &str) -> Result<PairPayload, ServiceError> {
        let session = self.session(session_id)?;
        let mut session = session.lock().expect("session poisoned");
        let (left, right) = session.draw(self.visualizations.len()).ok_or(ServiceError::Exhausted)?;
        let pair_id = format!("p{}", session.issued.len() + 1);
        session.issued.insert(
            pair_id.clone(),
            Issued {
                left,
                right,
                answered: false,
            },
        );
        Ok(PairPayload {
            pair_id,
            left: self.visualizations[left].clone(),
            right: self.visualizations[right].clone(),
        })
    }

    /// Claims the answer slot of an issued pair and builds its record.
    fn claim(&self, answer: &Answer) -> Result<PreferenceRecord, ServiceError> {
        let session = self.session(&answer.session)?;
        let mut session = session.lock().expect("session poisoned");
        let user = session.user.clone();
        let issued = session
            .issued
            .get_mut(&answer.pair_id)
            .ok_or_else(|| ServiceError::UnknownPair(answer.pair_id.clone()))?;
        if issued.answered {
            return Err(ServiceError::AlreadyAnswered(answer.pair_id.clone()));
        }
        issued.answered = true;
        Ok(PreferenceRecord {
            user,
            left: self.visualizations[issued.left].id.clone(),
            right: self.visualizations[issued.right].id.clone(),
            choice: answer.choice,
            timestamp: Utc::now(),
        })
    }

    fn release(&self, answer: &Answer) {
        if let Ok(session) = self.session(&answer.session) {
            if let Some(issued) = session.lock().expect("session poisoned").issued.get_mut(&answer.pair_id) {
                issued.answered = false;
            }
        }
    }

    /// Appends and syncs the record; counts change only once it is on disk.
    fn persist(&self, record: &PreferenceRecord) -> vizpref_core::Result<()> {
        let mut file = self.writer.lock().expect("log writer poisoned");
        append_preference(&mut file, record)?;
        self.stats.write().expect("stats lock poisoned").add(record);
        Ok(())
    }

    /// Durably records the answer to an issued pair; a pair accepts exactly one answer.
    pub fn record_preference(&self, answer: &Answer) -> Result<PreferenceRecord, ServiceError> {
        let record = self.claim(answer)?;
        if let Err(e) = self.persist(&record) {
            self.release(answer);
            return Err(e.into());
        }
        Ok(record)
    }
}

async fn create_session(State(state): State<Arc<AppState>>, Json(body): Json<NewSession>) -> ApiResult<SessionCreated> {
    let session_id = state.create_session(&body.user)?;
    Ok(Json(SessionCreated { session_id }))
}

async fn next_pair(State(state): State<Arc<AppState>>, Query(q): Query<PairQuery>) -> ApiResult<PairPayload> {
    state.next_pair(&q.session).map(Json)
}

async fn record_preference(State(state): State<Arc<AppState>>, Json(answer): Json<Answer>) -> ApiResult<Ack> {
    let worker = Arc::clone(&state);
    tokio::task::spawn_blocking(move || worker.record_preference(&answer))
        .await
        .map_err(|e| ServiceError::Writer(e.to_string()))??;
    Ok(Json(Ack { ok: true }))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Stats> {
    Json(state.stats())
}

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER_UI)
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/pair", get(next_pair))
        .route("/api/preference", post(record_preference))
        .route("/api/stats", get(stats))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    }
}

/// Binds `addr` and serves in the background; returns the bound address.
pub async fn spawn(config: &ServiceConfig, addr: SocketAddr) -> anyhow::Result<(SocketAddr, JoinHandle<()>)> {
    let state = Arc::new(AppState::load(config)?);
    let app = router(state, config.ui_dir.as_deref());
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok((bound, handle))
}

/// Serves until interrupted.
pub async fn serve(config: &ServiceConfig, addr: SocketAddr) -> anyhow::Result<()> {
    let state = Arc::new(AppState::load(config)?);
    let app = router(state, config.ui_dir.as_deref());
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
