//! Evolutionary optimisation of MLP classifiers with QuickProp-trained
//! fitness, and the pieces needed to farm fitness evaluation out to
//! remote workers.

pub mod dataset;
pub mod ea;
pub mod eval;
pub mod genome;
pub mod matrix;
pub mod mlp;
pub mod protocol;
pub mod queue;
#[cfg(feature = "testkit")]
pub mod testkit;

pub use dataset::{GlassDataset, Sample, ThreeWaySplit};
pub use ea::{run_ea, EaConfig, Evaluator, EvaluatorError, LocalEvaluator, ParallelLocalEvaluator, RunRecord};
pub use eval::{evaluate_genome, evaluate_task, EvalContext, Evaluation};
pub use genome::{Fitness, Genome, GenomeId, HiddenBounds, OperatorConfig, ProblemDims};
pub use matrix::Matrix;
pub use mlp::{MlpError, MlpNetwork, QpConfig, TrainReport};
pub use protocol::{EvaluationResult, EvaluationTask, JobDescriptor, QpParams};
pub use queue::{JobStore, QueueError};
