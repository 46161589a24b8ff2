//! Per-job task queue with leases and an append-only result store.
//!
//! [`JobState`] is a plain state machine driven by explicit monotonic
//! timestamps (milliseconds); [`JobStore`] wraps many jobs behind locks so an
//! HTTP front end can share it across request handlers. Each job has a
//! single logical writer: all of its mutations go through one mutex.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::protocol::{
    ErrorCode, EvaluationResult, EvaluationTask, JobDescriptor, JobStatus, JobStatusView, ResultsPage,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Gone(String),
}

impl QueueError {
    pub fn code(&self) -> ErrorCode {
        match self {
            QueueError::BadRequest(_) => ErrorCode::BadRequest,
            QueueError::NotFound(_) => ErrorCode::NotFound,
            QueueError::Gone(_) => ErrorCode::Gone,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lease {
    pub task_id: String,
    pub worker_id: String,
    pub issued_ms: u64,
    pub deadline_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Claim {
    Task(EvaluationTask),
    Empty,
    Terminated,
}

#[derive(Clone, Debug)]
struct InFlight {
    seq: u64,
    task: EvaluationTask,
    lease: Lease,
}

#[derive(Clone, Debug)]
pub struct JobState {
    job_id: String,
    descriptor: JobDescriptor,
    lease_ms: u64,
    status: JobStatus,
    pending: VecDeque<(u64, EvaluationTask)>,
    in_flight: BTreeMap<String, InFlight>,
    completed: HashSet<String>,
    /// Tasks discarded from the pending queue by termination.
    dropped: HashSet<String>,
    results: Vec<EvaluationResult>,
    known: HashSet<String>,
    next_seq: u64,
}

impl JobState {
    pub fn new(job_id: impl Into<String>, mut descriptor: JobDescriptor, lease_ms: u64) -> Self {
        let job_id = job_id.into();
        descriptor.job_id = Some(job_id.clone());
        Self {
            job_id,
            descriptor,
            lease_ms: lease_ms.max(1),
            status: JobStatus::Active,
            pending: VecDeque::new(),
            in_flight: BTreeMap::new(),
            completed: HashSet::new(),
            dropped: HashSet::new(),
            results: Vec::new(),
            known: HashSet::new(),
            next_seq: 0,
        }
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn descriptor(&self) -> &JobDescriptor {
        &self.descriptor
    }

    pub fn status(&self) -> JobStatus {
        self.status
    }

    pub fn lease_ms(&self) -> u64 {
        self.lease_ms
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn completed_len(&self) -> usize {
        self.completed.len()
    }

    pub fn results(&self) -> &[EvaluationResult] {
        &self.results
    }

    pub fn lease(&self, task_id: &str) -> Option<&Lease> {
        self.in_flight.get(task_id).map(|f| &f.lease)
    }

    pub fn view(&self) -> JobStatusView {
        JobStatusView {
            job_id: self.job_id.clone(),
            status: self.status,
            pending: self.pending.len(),
            in_flight: self.in_flight.len(),
            completed: self.completed.len(),
            results: self.results.len() as u64,
        }
    }

    /// Appends tasks in order; a task id seen before is skipped.
    pub fn enqueue(&mut self, tasks: Vec<EvaluationTask>) -> Result<usize, QueueError> {
        if self.status == JobStatus::Terminated {
            return Err(QueueError::Gone(format!("job {} is terminated", self.job_id)));
        }
        let mut accepted = 0;
        for task in tasks {
            if !self.known.insert(task.task_id.clone()) {
                continue;
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            self.pending.push_back((seq, task));
            accepted += 1;
        }
        Ok(accepted)
    }

    /// Pops the head of the queue under a fresh lease.
    pub fn claim(&mut self, worker_id: &str, now_ms: u64) -> Claim {
        if self.status == JobStatus::Terminated {
            return Claim::Terminated;
        }
        self.expire_leases(now_ms);
        let Some((seq, task)) = self.pending.pop_front() else {
            return Claim::Empty;
        };
        let lease = Lease {
            task_id: task.task_id.clone(),
            worker_id: worker_id.to_string(),
            issued_ms: now_ms,
            deadline_ms: now_ms + self.lease_ms,
        };
        self.in_flight.insert(
            task.task_id.clone(),
            InFlight {
                seq,
                task: task.clone(),
                lease,
            },
        );
        Claim::Task(task)
    }

    /// Stores the first result for a task. A late duplicate returns
    /// `Ok(false)` and leaves the stored result untouched. A result for a
    /// task that was re-queued after its lease expired is accepted and the
    /// queued copy withdrawn.
    pub fn submit(&mut self, result: EvaluationResult) -> Result<bool, QueueError> {
        let id = result.task_id.clone();
        if self.completed.contains(&id) {
            return Ok(false);
        }
        if self.in_flight.remove(&id).is_none() {
            match self.pending.iter().position(|(_, t)| t.task_id == id) {
                Some(pos) => {
                    self.pending.remove(pos);
                }
                None => {
                    return Err(QueueError::NotFound(format!(
                        "task {id} is not outstanding in job {}",
                        self.job_id
                    )))
                }
            }
        }
        self.completed.insert(id);
        self.results.push(result);
        Ok(true)
    }

    /// Results with cursor position greater than `after`, in arrival order.
    /// Cursor `n` means "the first n results have been seen".
    pub fn collect(&self, after: u64) -> Result<ResultsPage, QueueError> {
        let len = self.results.len() as u64;
        if after > len {
            return Err(QueueError::BadRequest(format!("cursor {after} is beyond {len}")));
        }
        Ok(ResultsPage {
            results: self.results[after as usize..].to_vec(),
            cursor: len,
        })
    }

    /// Moves every lease with a deadline before `now_ms` back to the front of
    /// the queue, oldest task first.
    pub fn expire_leases(&mut self, now_ms: u64) -> usize {
        let mut expired: Vec<InFlight> = Vec::new();
        self.in_flight.retain(|_, f| {
            if f.lease.deadline_ms < now_ms {
                expired.push(f.clone());
                false
            } else {
                true
            }
        });
        expired.sort_by_key(|f| f.seq);
        let n = expired.len();
        for f in expired.into_iter().rev() {
            self.pending.push_front((f.seq, f.task));
        }
        n
    }

    /// Drops pending work and refuses further claims. Idempotent.
    pub fn terminate(&mut self) {
        self.status = JobStatus::Terminated;
        for (_, t) in self.pending.drain(..) {
            self.dropped.insert(t.task_id);
        }
    }

    /// Checks that every known task id lives in exactly one of pending,
    /// in-flight, completed or dropped, and that the result store holds at
    /// most one result per task.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut homes: HashMap<&str, usize> = HashMap::new();
        for (_, t) in &self.pending {
            *homes.entry(&t.task_id).or_default() += 1;
        }
        for id in self.in_flight.keys() {
            *homes.entry(id).or_default() += 1;
        }
        for id in self.completed.iter().chain(&self.dropped) {
            *homes.entry(id).or_default() += 1;
        }
        if homes.len() != self.known.len() {
            return Err(format!("{} homed tasks but {} known", homes.len(), self.known.len()));
        }
        if let Some((id, n)) = homes.iter().find(|(_, n)| **n != 1) {
            return Err(format!("task {id} has {n} homes"));
        }
        let mut seen = HashSet::new();
        for r in &self.results {
            if !seen.insert(&r.task_id) {
                return Err(format!("task {} has more than one result", r.task_id));
            }
        }
        if seen.len() != self.completed.len() {
            return Err("completed set and result store disagree".into());
        }
        Ok(())
    }
}

/// Thread-safe collection of jobs keyed by id, with a shared monotonic clock.
pub struct JobStore {
    jobs: RwLock<HashMap<String, Arc<Mutex<JobState>>>>,
    order: RwLock<Vec<String>>,
    epoch: Instant,
}

impl Default for JobStore {
    fn default() -> Self {
        Self::new()
    }
}

impl JobStore {
    pub fn new() -> Self {
        Self {
            jobs: RwLock::new(HashMap::new()),
            order: RwLock::new(Vec::new()),
            epoch: Instant::now(),
        }
    }

    /// Milliseconds since the store was created.
    pub fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    pub fn create_job(&self, descriptor: JobDescriptor, lease_ms: u64) -> Result<String, QueueError> {
        descriptor.validate().map_err(QueueError::BadRequest)?;
        let job_id = uuid::Uuid::new_v4().simple().to_string();
        self.insert_job(JobState::new(job_id.clone(), descriptor, lease_ms));
        Ok(job_id)
    }

    /// Adds or replaces a job. Listing order is first insertion.
    pub fn insert_job(&self, state: JobState) {
        let id = state.job_id().to_string();
        let mut jobs = self.jobs.write();
        if jobs.insert(id.clone(), Arc::new(Mutex::new(state))).is_none() {
            self.order.write().push(id);
        }
    }

    pub fn job(&self, job_id: &str) -> Result<Arc<Mutex<JobState>>, QueueError> {
        self.jobs
            .read()
            .get(job_id)
            .cloned()
            .ok_or_else(|| QueueError::NotFound(format!("no job {job_id}")))
    }

    pub fn job_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.jobs.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn descriptor(&self, job_id: &str) -> Result<JobDescriptor, QueueError> {
        Ok(self.job(job_id)?.lock().descriptor().clone())
    }

    /// Status of every job, oldest first.
    pub fn list(&self) -> Vec<JobStatusView> {
        let order = self.order.read().clone();
        order
            .iter()
            .filter_map(|id| self.job(id).ok())
            .map(|j| j.lock().view())
            .collect()
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatusView, QueueError> {
        Ok(self.job(job_id)?.lock().view())
    }

    pub fn enqueue(&self, job_id: &str, tasks: Vec<EvaluationTask>) -> Result<usize, QueueError> {
        self.job(job_id)?.lock().enqueue(tasks)
    }

    pub fn claim(&self, job_id: &str, worker_id: &str) -> Result<Claim, QueueError> {
        let now = self.now_ms();
        Ok(self.job(job_id)?.lock().claim(worker_id, now))
    }

    pub fn submit(&self, job_id: &str, result: EvaluationResult) -> Result<bool, QueueError> {
        self.job(job_id)?.lock().submit(result)
    }

    pub fn collect(&self, job_id: &str, after: u64) -> Result<ResultsPage, QueueError> {
        self.job(job_id)?.lock().collect(after)
    }

    pub fn terminate(&self, job_id: &str) -> Result<(), QueueError> {
        self.job(job_id)?.lock().terminate();
        Ok(())
    }

    /// Expires stale leases in every job; returns the number re-queued.
    pub fn expire_all(&self) -> usize {
        let now = self.now_ms();
        let jobs: Vec<_> = self.jobs.read().values().cloned().collect();
        jobs.iter().map(|j| j.lock().expire_leases(now)).sum()
    }
}
