//! Fitness evaluation: the costly function farmed out to workers.
//!
//! An [`EvalContext`] is rebuilt independently by every worker (and by the
//! master) from a [`JobDescriptor`]; since parsing, scaling and splitting are
//! deterministic, the fitness of a genome is a pure function of the
//! descriptor and the genome.

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::dataset::{self, DatasetError, GlassDataset, Sample, ThreeWaySplit};
use crate::genome::{Fitness, Genome};
use crate::mlp::{self, MlpError, TrainReport};
use crate::protocol::{EvaluationResult, EvaluationTask, JobDescriptor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid job descriptor: {0}")]
    Descriptor(String),
}

#[derive(Clone, Debug)]
pub struct EvalContext {
    pub descriptor: JobDescriptor,
    pub dataset: GlassDataset,
    pub split: ThreeWaySplit,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl EvalContext {
    /// Loads the descriptor's dataset (from `dataset_path` or the vendored
    /// copy), verifies its checksum, scales it and splits it.
    pub fn build(descriptor: &JobDescriptor, dataset_path: Option<&Path>) -> Result<Self, ContextError> {
        descriptor.validate().map_err(ContextError::Descriptor)?;
        let (checksum, raw) = dataset::load_named(&descriptor.dataset_name, dataset_path)?;
        if checksum != descriptor.dataset_checksum {
            return Err(DatasetError::Checksum {
                expected: descriptor.dataset_checksum.clone(),
                found: checksum,
            }
            .into());
        }
        Self::from_dataset(descriptor, raw)
    }

    pub fn from_dataset(descriptor: &JobDescriptor, raw: GlassDataset) -> Result<Self, ContextError> {
        let dims = descriptor.problem_dims;
        if raw.n_features() != dims.inputs || raw.n_classes() != dims.outputs {
            return Err(ContextError::Descriptor(format!(
                "problem_dims {}x{} do not match dataset {}x{}",
                dims.inputs,
                dims.outputs,
                raw.n_features(),
                raw.n_classes()
            )));
        }
        let dataset = raw.normalize();
        let split = dataset.split(descriptor.split_seed, descriptor.split_ratios)?;
        Ok(Self {
            descriptor: descriptor.clone(),
            train: dataset.select(&split.train),
            validation: dataset.select(&split.validation),
            test: dataset.select(&split.test),
            dataset,
            split,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub fitness: Fitness,
    pub train_report: TrainReport,
    pub diverged: bool,
}

/// Trains a copy of the genome's network on the training split for the
/// descriptor's epoch budget and scores it on the validation split.
pub fn evaluate_genome(ctx: &EvalContext, genome: &Genome) -> Evaluation {
    evaluate_with_epochs(ctx, genome, ctx.descriptor.qp.max_epochs)
}

pub fn evaluate_with_epochs(ctx: &EvalContext, genome: &Genome, epochs: usize) -> Evaluation {
    train_and_score(ctx, genome, epochs, &ctx.validation)
}

/// Test-split error of the genome after the usual fitness training.
pub fn test_error(ctx: &EvalContext, genome: &Genome) -> Evaluation {
    train_and_score(ctx, genome, ctx.descriptor.qp.max_epochs, &ctx.test)
}

fn train_and_score(ctx: &EvalContext, genome: &Genome, epochs: usize, score_on: &[Sample]) -> Evaluation {
    let worst = |train_report| Evaluation {
        fitness: Fitness::worst(genome.hidden_count),
        train_report,
        diverged: true,
    };
    let net = match genome.network() {
        Ok(net) if genome.dims() == ctx.descriptor.problem_dims => net,
        _ => {
            return worst(TrainReport {
                epochs_run: 0,
                final_train_mse: 0.0,
            })
        }
    };
    let cfg = ctx.descriptor.qp.with_epsilon(genome.learning_rate);
    match mlp::train_epochs(&net, &ctx.train, &cfg, epochs) {
        Ok((trained, report)) => {
            let err = trained
                .classification_error(score_on)
                .expect("split parts are non-empty and labelled within range");
            Evaluation {
                fitness: Fitness {
                    validation_error_pct: err,
                    hidden_count: genome.hidden_count,
                },
                train_report: report,
                diverged: false,
            }
        }
        Err(MlpError::Diverged { epoch, last_mse }) => worst(TrainReport {
            epochs_run: epoch - 1,
            final_train_mse: last_mse,
        }),
        Err(_) => worst(TrainReport {
            epochs_run: 0,
            final_train_mse: 0.0,
        }),
    }
}

/// Evaluates a claimed task and packages the wire result.
pub fn evaluate_task(ctx: &EvalContext, task: &EvaluationTask, worker_id: &str) -> EvaluationResult {
    let started = Instant::now();
    let eval = evaluate_genome(ctx, &task.genome);
    EvaluationResult {
        task_id: task.task_id.clone(),
        worker_id: worker_id.to_string(),
        fitness: eval.fitness,
        train_report: eval.train_report,
        eval_duration_ms: started.elapsed().as_millis() as u64,
        diverged: eval.diverged,
    }
}
