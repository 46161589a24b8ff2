//! Fixtures shared by the benchmarks.

use gprop_core::eval::EvalContext;
use gprop_core::genome::{random_genome, GenomeId};
use gprop_core::protocol::{EvaluationResult, EvaluationTask};
use gprop_core::{Fitness, Genome, HiddenBounds, JobDescriptor, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Glass context with `epochs` training epochs per evaluation.
pub fn glass_context(epochs: usize) -> EvalContext {
    let mut d = JobDescriptor::glass(1);
    d.qp.max_epochs = epochs;
    EvalContext::build(&d, None).expect("vendored data builds")
}

/// A random genome with exactly `hidden` hidden units.
pub fn genome_with_hidden(ctx: &EvalContext, hidden: usize, seed: u64) -> Genome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = HiddenBounds::new(hidden, hidden).expect("valid bounds");
    random_genome(&mut rng, ctx.descriptor.problem_dims, bounds).expect("valid genome")
}

pub fn tasks(ctx: &EvalContext, job_id: &str, n: usize) -> Vec<EvaluationTask> {
    let genome = genome_with_hidden(ctx, 4, 0);
    (0..n)
        .map(|i| EvaluationTask {
            task_id: format!("t{i}"),
            job_id: job_id.to_string(),
            genome: Genome {
                genome_id: GenomeId(i as u64),
                ..genome.clone()
            },
            generation: 1,
        })
        .collect()
}

pub fn result_for(task: &EvaluationTask, worker: &str) -> EvaluationResult {
    EvaluationResult {
        task_id: task.task_id.clone(),
        worker_id: worker.to_string(),
        fitness: Fitness {
            validation_error_pct: 30.0,
            hidden_count: task.genome.hidden_count,
        },
        train_report: TrainReport {
            epochs_run: 1,
            final_train_mse: 0.1,
        },
        eval_duration_ms: 1,
        diverged: false,
    }
}
