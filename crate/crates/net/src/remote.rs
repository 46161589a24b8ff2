//! Evaluator that farms each batch out through the coordination server.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use gprop_core::ea::{Evaluator, EvaluatorError};
use gprop_core::eval::Evaluation;
use gprop_core::protocol::{EvaluationTask, JobDescriptor, JobStatus};
use gprop_core::Genome;

use crate::client::{Client, ClientError};

pub struct RemoteEvaluator {
    client: Client,
    job_id: String,
    cursor: u64,
    batch: u64,
    pub poll_interval: Duration,
    /// Consecutive transport failures tolerated while waiting on a batch.
    pub max_transport_failures: u32,
    /// Gives up on a batch that makes no progress for this long.
    pub stall_timeout: Option<Duration>,
    terminated: bool,
}

impl RemoteEvaluator {
    /// Attaches to an existing job.
    pub fn attach(client: Client, job_id: impl Into<String>) -> Self {
        Self {
            client,
            job_id: job_id.into(),
            cursor: 0,
            batch: 0,
            poll_interval: Duration::from_millis(200),
            max_transport_failures: 50,
            stall_timeout: None,
            terminated: false,
        }
    }

    /// Creates a job for `descriptor` and attaches to it.
    pub fn create(client: Client, descriptor: &JobDescriptor) -> Result<Self, ClientError> {
        let job_id = client.create_job(descriptor)?;
        Ok(Self::attach(client, job_id))
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    fn fail(e: impl std::fmt::Display) -> EvaluatorError {
        EvaluatorError(e.to_string())
    }
}

impl Evaluator for RemoteEvaluator {
    fn evaluate(&mut self, generation: u32, genomes: &[Genome]) -> Result<Vec<Evaluation>, EvaluatorError> {
        if genomes.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch;
        self.batch += 1;
        let mut slot: HashMap<String, usize> = HashMap::with_capacity(genomes.len());
        let tasks: Vec<EvaluationTask> = genomes
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let task_id = format!("b{batch}-g{generation}-{i}");
                slot.insert(task_id.clone(), i);
                EvaluationTask {
                    task_id,
                    job_id: self.job_id.clone(),
                    genome: g.clone(),
                    generation,
                }
            })
            .collect();

        let mut failures = 0u32;
        let transient = |e: ClientError, failures: &mut u32| -> Result<(), EvaluatorError> {
            *failures += 1;
            if !e.is_transient() || *failures > self.max_transport_failures {
                return Err(Self::fail(e));
            }
            std::thread::sleep(self.poll_interval);
            Ok(())
        };
        loop {
            match self.client.enqueue(&self.job_id, tasks.clone()) {
                Ok(_) => break,
                Err(e) => transient(e, &mut failures)?,
            }
        }

        let mut out: Vec<Option<Evaluation>> = vec![None; genomes.len()];
        let mut missing = genomes.len();
        let mut last_progress = Instant::now();
        while missing > 0 {
            match self.client.collect(&self.job_id, self.cursor) {
                Ok(page) => {
                    failures = 0;
                    self.cursor = page.cursor;
                    let before = missing;
                    for r in page.results {
                        if let Some(&i) = slot.get(&r.task_id) {
                            if out[i].is_none() {
                                out[i] = Some(Evaluation {
                                    fitness: r.fitness,
                                    train_report: r.train_report,
                                    diverged: r.diverged,
                                });
                                missing -= 1;
                            }
                        }
                    }
                    if missing == 0 {
                        break;
                    }
                    if missing < before {
                        last_progress = Instant::now();
                    } else {
                        let status = self.client.status(&self.job_id).map_err(Self::fail)?;
                        if status.status == JobStatus::Terminated {
                            return Err(EvaluatorError(format!(
                                "job {} was terminated with {missing} evaluations outstanding",
                                self.job_id
                            )));
                        }
                        if let Some(limit) = self.stall_timeout {
                            if last_progress.elapsed() > limit {
                                return Err(EvaluatorError(format!(
                                    "no results for {limit:?} with {missing} outstanding"
                                )));
                            }
                        }
                    }
                    std::thread::sleep(self.poll_interval);
                }
                Err(e) => transient(e, &mut failures)?,
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every slot filled")).collect())
    }

    fn finish(&mut self) -> Result<(), EvaluatorError> {
        if self.terminated {
            return Ok(());
        }
        self.terminated = true;
        self.client.terminate(&self.job_id).map(|_| ()).map_err(Self::fail)
    }
}
