//! REST coordination server: per-job task queues with leases, served over
//! HTTP/1.1 with JSON bodies.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use gprop_core::eval::{self, EvalContext};
use gprop_core::genome::{random_genome, HiddenBounds};
use gprop_core::protocol::{
    self, AcceptedCount, ClaimRequest, CreateJobResponse, ErrorCode, ErrorEnvelope, EvaluationResult, JobDescriptor,
    JobList, SubmitAck, TaskBatch, WireMessage,
};
use gprop_core::queue::{Claim, JobStore, QueueError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::journal::{self, Journal, JournalEvent};

pub const DEFAULT_PORT: u16 = 3000;

/// How long a claimed task stays leased to its worker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LeasePolicy {
    Fixed { ms: u64 },
    /// `multiplier` times one timed evaluation of a largest-size genome
    /// under the job's descriptor, never below `floor_ms`. Falls back to
    /// `fallback_ms` if the server cannot build the evaluation context.
    Measured { multiplier: u32, floor_ms: u64, fallback_ms: u64 },
}

impl Default for LeasePolicy {
    fn default() -> Self {
        LeasePolicy::Measured {
            multiplier: 10,
            floor_ms: 1_000,
            fallback_ms: 120_000,
        }
    }
}

impl LeasePolicy {
    pub fn lease_for(&self, descriptor: &JobDescriptor) -> u64 {
        match *self {
            LeasePolicy::Fixed { ms } => ms,
            LeasePolicy::Measured {
                multiplier,
                floor_ms,
                fallback_ms,
            } => match time_one_evaluation(descriptor) {
                Some(d) => (d.as_millis() as u64 * multiplier as u64).max(floor_ms),
                None => fallback_ms,
            },
        }
    }
}

fn time_one_evaluation(descriptor: &JobDescriptor) -> Option<Duration> {
    let ctx = EvalContext::build(descriptor, None).ok()?;
    let b = descriptor.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = random_genome(&mut rng, descriptor.problem_dims, HiddenBounds { min: b.max, max: b.max }).ok()?;
    let started = Instant::now();
    eval::evaluate_genome(&ctx, &g);
    Some(started.elapsed())
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub lease: LeasePolicy,
    pub journal: Option<PathBuf>,
    pub expiry_interval: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            lease: LeasePolicy::default(),
            journal: None,
            expiry_interval: Duration::from_millis(200),
        }
    }
}

pub struct AppState {
    pub store: JobStore,
    journal: Option<Journal>,
    lease: LeasePolicy,
}

impl AppState {
    /// Builds the state, replaying the journal first if one is configured.
    pub fn open(cfg: &ServerConfig) -> std::io::Result<Self> {
        let store = JobStore::new();
        let journal = match &cfg.journal {
            Some(path) => {
                let n = journal::replay(path, &store)?;
                tracing::info!(path = %path.display(), events = n, "journal replayed");
                Some(Journal::open(path)?)
            }
            None => None,
        };
        Ok(Self {
            store,
            journal,
            lease: cfg.lease,
        })
    }

    fn record(&self, event: JournalEvent) -> Result<(), ApiError> {
        match &self.journal {
            Some(j) => j
                .append(&event)
                .map_err(|e| ApiError(ErrorCode::Internal, format!("journal write failed: {e}"))),
            None => Ok(()),
        }
    }
}

struct ApiError(ErrorCode, String);

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        ApiError(e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json(
            status,
            &ErrorEnvelope {
                code: self.0,
                message: self.1,
            },
        )
    }
}

fn json<M: WireMessage>(status: StatusCode, body: &M) -> Response {
    (status, [(header::CONTENT_TYPE, protocol::CONTENT_TYPE)], protocol::encode(body)).into_response()
}

fn body<M: WireMessage>(bytes: &[u8]) -> Result<M, ApiError> {
    protocol::decode(bytes).map_err(|e| ApiError(ErrorCode::BadRequest, e.to_string()))
}

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(|| async { "ok" }))
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/status", get(get_status))
        .route("/jobs/{id}/tasks", post(enqueue))
        .route("/jobs/{id}/claim", post(claim))
        .route("/jobs/{id}/results", post(submit).get(collect))
        .route("/jobs/{id}/terminate", post(terminate))
        .with_state(state)
}

async fn create_job(State(st): Shared, bytes: Bytes) -> Result<Response, ApiError> {
    let mut descriptor: JobDescriptor = body(&bytes)?;
    descriptor.job_id = None;
    let policy = st.lease;
    let d = descriptor.clone();
    let lease_ms = tokio::task::spawn_blocking(move || policy.lease_for(&d))
        .await
        .map_err(|e| ApiError(ErrorCode::Internal, e.to_string()))?;
    let job_id = st.store.create_job(descriptor.clone(), lease_ms)?;
    st.record(JournalEvent::CreateJob {
        job_id: job_id.clone(),
        descriptor,
        lease_ms,
    })?;
    tracing::info!(%job_id, lease_ms, "job created");
    Ok(json(StatusCode::CREATED, &CreateJobResponse { job_id }))
}

async fn list_jobs(State(st): Shared) -> Response {
    json(StatusCode::OK, &JobList { jobs: st.store.list() })
}

async fn get_job(State(st): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &st.store.descriptor(&id)?))
}

async fn get_status(State(st): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &st.store.status(&id)?))
}

async fn enqueue(State(st): Shared, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ApiError> {
    let batch: TaskBatch = body(&bytes)?;
    let job = st.store.job(&id)?;
    let mut job = job.lock();
    let accepted = job.enqueue(batch.tasks.clone())?;
    st.record(JournalEvent::Enqueue {
        job_id: id,
        tasks: batch.tasks,
    })?;
    Ok(json(StatusCode::ACCEPTED, &AcceptedCount { accepted }))
}

async fn claim(State(st): Shared, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ApiError> {
    let req: ClaimRequest = body(&bytes)?;
    match st.store.claim(&id, &req.worker_id)? {
        Claim::Task(task) => Ok(json(StatusCode::OK, &task)),
        Claim::Empty => Ok(StatusCode::NO_CONTENT.into_response()),
        Claim::Terminated => Err(ApiError(ErrorCode::Gone, format!("job {id} is terminated"))),
    }
}

async fn submit(State(st): Shared, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ApiError> {
    let result: EvaluationResult = body(&bytes)?;
    let job = st.store.job(&id)?;
    let mut job = job.lock();
    let accepted = job.submit(result.clone())?;
    if accepted {
        st.record(JournalEvent::Result { job_id: id, result })?;
    }
    Ok(json(StatusCode::OK, &SubmitAck { accepted }))
}

#[derive(Deserialize)]
struct After {
    #[serde(default)]
    after: u64,
}

async fn collect(State(st): Shared, Path(id): Path<String>, Query(q): Query<After>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &st.store.collect(&id, q.after)?))
}

async fn terminate(State(st): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let job = st.store.job(&id)?;
    let mut job = job.lock();
    job.terminate();
    st.record(JournalEvent::Terminate { job_id: id })?;
    Ok(json(StatusCode::OK, &job.view()))
}

/// Serves until `shutdown` resolves, expiring leases in the background.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    expiry_interval: Duration,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let expiry_state = state.clone();
    let expiry = tokio::spawn(async move {
        let mut tick = tokio::time::interval(expiry_interval);
        loop {
            tick.tick().await;
            let n = expiry_state.store.expire_all();
            if n > 0 {
                tracing::warn!(requeued = n, "leases expired");
            }
        }
    });
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    expiry.abort();
    result
}

/// A server running on its own thread and runtime; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    /// Binds `{cfg.host}:{cfg.port}` (port 0 picks a free one) and starts serving.
    pub fn spawn(cfg: ServerConfig) -> std::io::Result<Self> {
        let state = Arc::new(AppState::open(&cfg)?);
        let std_listener = std::net::TcpListener::bind((cfg.host.as_str(), cfg.port))?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let served = state.clone();
        let thread = std::thread::Builder::new().name("gprop-server".into()).spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
            rt.block_on(async move {
                let listener = TcpListener::from_std(std_listener)?;
                serve(listener, served, cfg.expiry_interval, async {
                    let _ = stopped.await;
                })
                .await
            })
        })?;
        Ok(Self {
            addr,
            state,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        if self.addr.ip().is_unspecified() {
            format!("http://127.0.0.1:{}", self.addr.port())
        } else {
            format!("http://{}", self.addr)
        }
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}
