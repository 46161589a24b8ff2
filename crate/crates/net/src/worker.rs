//! Worker process: claim a task, evaluate it, submit the result, repeat
//! until the job is terminated.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gprop_core::eval::{self, ContextError, EvalContext};
use gprop_core::protocol::JobStatus;
use rand::Rng;
use thiserror::Error;

use crate::client::{ClaimOutcome, Client, ClientError};

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("invalid worker config: {0}")]
    Config(String),
    #[error("cannot build evaluation context: {0}")]
    Context(#[from] ContextError),
    #[error("server unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("server rejected request: {0}")]
    Rejected(ClientError),
    #[error("stopped by fault injection after {0} claims")]
    InjectedCrash(usize),
}

#[derive(Clone, Debug)]
pub struct WorkerConfig {
    pub server_url: String,
    pub job_id: String,
    pub worker_id: String,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    /// Consecutive transport failures tolerated before giving up.
    pub max_transport_failures: u32,
    /// How long a computed result keeps being resubmitted on transport errors.
    pub submit_retry_window: Duration,
    /// Independent claim loops (K tasks in flight).
    pub parallel: usize,
    pub dataset_path: Option<PathBuf>,
    /// Test hook: return [`WorkerError::InjectedCrash`] right after the
    /// n-th claim, leaving that task leased but unanswered.
    pub crash_after_claims: Option<usize>,
}

impl WorkerConfig {
    pub fn new(server_url: impl Into<String>, job_id: impl Into<String>) -> Self {
        Self {
            server_url: server_url.into(),
            job_id: job_id.into(),
            worker_id: default_worker_id(),
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(2),
            max_transport_failures: 30,
            submit_retry_window: Duration::from_secs(60),
            parallel: 1,
            dataset_path: None,
            crash_after_claims: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkerError> {
        if self.initial_backoff.is_zero() || self.initial_backoff > self.max_backoff {
            return Err(WorkerError::Config("need 0 < initial backoff <= max backoff".into()));
        }
        if self.parallel == 0 {
            return Err(WorkerError::Config("parallel must be at least 1".into()));
        }
        if self.worker_id.is_empty() || self.job_id.is_empty() {
            return Err(WorkerError::Config("worker and job ids must not be empty".into()));
        }
        Ok(())
    }
}

/// Host name plus a random suffix.
pub fn default_worker_id() -> String {
    let host = std::env::var("HOSTNAME")
        .ok()
        .filter(|h| !h.is_empty())
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok().map(|h| h.trim().to_string()))
        .filter(|h| !h.is_empty())
        .unwrap_or_else(|| "worker".into());
    format!("{host}-{:06x}", rand::rng().random_range(0..0x100_0000u32))
}

/// Doubling wait, capped.
#[derive(Clone, Debug)]
pub struct Backoff {
    initial: Duration,
    max: Duration,
    next: Duration,
}

impl Backoff {
    pub fn new(initial: Duration, max: Duration) -> Self {
        Self {
            initial,
            max,
            next: initial,
        }
    }

    pub fn next_wait(&mut self) -> Duration {
        let wait = self.next;
        self.next = (self.next * 2).min(self.max);
        wait
    }

    pub fn reset(&mut self) {
        self.next = self.initial;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkerSummary {
    pub claimed: usize,
    pub submitted: usize,
    /// Submissions the server reported as duplicates.
    pub rejected: usize,
}

impl WorkerSummary {
    fn add(&mut self, other: &WorkerSummary) {
        self.claimed += other.claimed;
        self.submitted += other.submitted;
        self.rejected += other.rejected;
    }
}

/// Counts consecutive transport failures against a budget.
struct Retry {
    failures: u32,
    budget: u32,
}

impl Retry {
    fn fail(&mut self, err: ClientError) -> Result<(), WorkerError> {
        if !err.is_transient() {
            return Err(WorkerError::Rejected(err));
        }
        self.failures += 1;
        if self.failures > self.budget {
            return Err(WorkerError::Unreachable {
                attempts: self.failures,
                last: err.to_string(),
            });
        }
        tracing::debug!(failures = self.failures, %err, "transient failure");
        Ok(())
    }

    fn ok(&mut self) {
        self.failures = 0;
    }
}

/// Fetches the job descriptor and builds the evaluation context.
pub fn prepare(cfg: &WorkerConfig, client: &Client) -> Result<EvalContext, WorkerError> {
    let mut backoff = Backoff::new(cfg.initial_backoff, cfg.max_backoff);
    let mut retry = Retry {
        failures: 0,
        budget: cfg.max_transport_failures,
    };
    let descriptor = loop {
        match client.descriptor(&cfg.job_id) {
            Ok(d) => break d,
            Err(e) => {
                retry.fail(e)?;
                std::thread::sleep(backoff.next_wait());
            }
        }
    };
    Ok(EvalContext::build(&descriptor, cfg.dataset_path.as_deref())?)
}

/// Runs until the job is terminated. With `parallel > 1`, runs that many
/// loops on separate threads, sharing one read-only context.
pub fn run_worker(cfg: &WorkerConfig) -> Result<WorkerSummary, WorkerError> {
    cfg.validate()?;
    let client = Client::new(&cfg.server_url).map_err(|e| WorkerError::Config(e.to_string()))?;
    let ctx = Arc::new(prepare(cfg, &client)?);
    tracing::info!(worker = %cfg.worker_id, job = %cfg.job_id, train = ctx.train.len(), "context ready");
    if cfg.parallel == 1 {
        return claim_loop(cfg, &cfg.worker_id, &client, &ctx);
    }
    let handles: Vec<_> = (0..cfg.parallel)
        .map(|k| {
            let (cfg, client, ctx) = (cfg.clone(), client.clone(), ctx.clone());
            std::thread::spawn(move || claim_loop(&cfg, &format!("{}-{k}", cfg.worker_id), &client, &ctx))
        })
        .collect();
    let mut total = WorkerSummary::default();
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(s)) => total.add(&s),
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(WorkerError::Config("worker thread panicked".into()));
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

/// Serves whatever job the server has open: attaches to the oldest active
/// job not yet served, works it until it terminates, then looks for the
/// next. `cfg.job_id` is ignored. Returns after `max_jobs` jobs if given,
/// otherwise only on error.
pub fn follow(cfg: &WorkerConfig, max_jobs: Option<usize>) -> Result<WorkerSummary, WorkerError> {
    let client = Client::new(&cfg.server_url).map_err(|e| WorkerError::Config(e.to_string()))?;
    let mut backoff = Backoff::new(cfg.initial_backoff, cfg.max_backoff);
    let mut retry = Retry {
        failures: 0,
        budget: cfg.max_transport_failures,
    };
    let mut served: Vec<String> = Vec::new();
    let mut total = WorkerSummary::default();
    while max_jobs.is_none_or(|m| served.len() < m) {
        let listed = match client.list_jobs() {
            Ok(l) => {
                retry.ok();
                l
            }
            Err(e) => {
                retry.fail(e)?;
                std::thread::sleep(backoff.next_wait());
                continue;
            }
        };
        let next = listed
            .jobs
            .into_iter()
            .find(|j| j.status == JobStatus::Active && !served.contains(&j.job_id));
        let Some(job) = next else {
            std::thread::sleep(backoff.next_wait());
            continue;
        };
        backoff.reset();
        tracing::info!(job = %job.job_id, "attaching");
        let mut job_cfg = cfg.clone();
        job_cfg.job_id = job.job_id.clone();
        served.push(job.job_id);
        match run_worker(&job_cfg) {
            Ok(s) => total.add(&s),
            // the job vanished or was torn down between listing and attaching
            Err(WorkerError::Rejected(e)) => tracing::warn!(%e, "job skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(total)
}

/// One claim/evaluate/submit loop, for callers that already hold a context.
pub fn claim_loop(
    cfg: &WorkerConfig,
    worker_id: &str,
    client: &Client,
    ctx: &EvalContext,
) -> Result<WorkerSummary, WorkerError> {
    let mut backoff = Backoff::new(cfg.initial_backoff, cfg.max_backoff);
    let mut retry = Retry {
        failures: 0,
        budget: cfg.max_transport_failures,
    };
    let mut summary = WorkerSummary::default();
    loop {
        match client.claim(&cfg.job_id, worker_id) {
            Ok(ClaimOutcome::Terminated) => {
                tracing::info!(worker = worker_id, ?summary, "job terminated");
                return Ok(summary);
            }
            Ok(ClaimOutcome::Empty) => {
                retry.ok();
                std::thread::sleep(backoff.next_wait());
            }
            Ok(ClaimOutcome::Task(task)) => {
                retry.ok();
                backoff.reset();
                summary.claimed += 1;
                if cfg.crash_after_claims == Some(summary.claimed) {
                    return Err(WorkerError::InjectedCrash(summary.claimed));
                }
                let claimed_at = Instant::now();
                let result = eval::evaluate_task(ctx, &task, worker_id);
                let mut submit_backoff = Backoff::new(cfg.initial_backoff, cfg.max_backoff);
                loop {
                    match client.submit(&cfg.job_id, &result) {
                        Ok(accepted) => {
                            summary.submitted += 1;
                            if !accepted {
                                summary.rejected += 1;
                            }
                            break;
                        }
                        Err(e) if e.is_transient() && claimed_at.elapsed() < cfg.submit_retry_window => {
                            tracing::debug!(%e, task = %task.task_id, "resubmitting");
                            std::thread::sleep(submit_backoff.next_wait());
                        }
                        Err(e) => {
                            // the lease has lapsed or the server forgot the
                            // task; someone else will evaluate it
                            tracing::warn!(%e, task = %task.task_id, "result dropped");
                            break;
                        }
                    }
                }
            }
            Err(e) => {
                retry.fail(e)?;
                std::thread::sleep(backoff.next_wait());
            }
        }
    }
}
