//! Single EA runs, local or against a server, and their output files.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use gprop_core::ea::{self, GenerationStats, ParallelLocalEvaluator, RunRecord};
use gprop_core::LocalEvaluator;
use gprop_net::{Client, RemoteEvaluator};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub fn run_local(cfg: &RunConfig, threads: bool) -> anyhow::Result<RunRecord> {
    let ctx = Arc::new(cfg.context()?);
    let record = if threads {
        ea::run_ea(&cfg.ea, &ctx, &mut ParallelLocalEvaluator::new(ctx.clone()))?
    } else {
        ea::run_ea(&cfg.ea, &ctx, &mut LocalEvaluator::new(ctx.clone()))?
    };
    Ok(record)
}

#[derive(Clone, Debug)]
pub struct RemoteOptions {
    pub poll_interval: Duration,
    /// Fail if no result arrives for this long.
    pub stall_timeout: Option<Duration>,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_millis(200),
            stall_timeout: None,
        }
    }
}

/// Creates a job on `server`, runs the EA with remote evaluation and
/// terminates the job. `on_job` sees the job id before the first batch.
pub fn run_remote(
    cfg: &RunConfig,
    server: &str,
    opts: &RemoteOptions,
    on_job: impl FnOnce(&str) -> anyhow::Result<()>,
) -> anyhow::Result<RunRecord> {
    let ctx = cfg.context()?;
    let client = Client::new(server)?;
    let mut evaluator = RemoteEvaluator::create(client, &ctx.descriptor)
        .with_context(|| format!("creating job on {server}"))?;
    evaluator.poll_interval = opts.poll_interval;
    evaluator.stall_timeout = opts.stall_timeout;
    on_job(evaluator.job_id())?;
    Ok(ea::run_ea(&cfg.ea, &ctx, &mut evaluator)?)
}

/// One line of `generations.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub generation: u32,
    pub best_validation_error_pct: f64,
    pub best_hidden_count: usize,
    pub mean_validation_error_pct: f64,
    pub evaluations_dispatched: usize,
    pub replaced: usize,
    pub diverged: usize,
    pub wall_ms: f64,
}

impl From<&GenerationStats> for GenerationRow {
    fn from(g: &GenerationStats) -> Self {
        Self {
            generation: g.generation,
            best_validation_error_pct: g.best_fitness.validation_error_pct,
            best_hidden_count: g.best_fitness.hidden_count,
            mean_validation_error_pct: g.mean_validation_error,
            evaluations_dispatched: g.evaluations_dispatched,
            replaced: g.replaced,
            diverged: g.diverged,
            wall_ms: g.wall_ms,
        }
    }
}

/// Writes `run.json` and `generations.csv` into `dir`, creating it.
pub fn write_outputs(record: &RunRecord, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = serde_json::to_vec_pretty(record)?;
    std::fs::write(dir.join("run.json"), json)?;
    let rows: Vec<GenerationRow> = record.generations.iter().map(GenerationRow::from).collect();
    let file = std::fs::File::create(dir.join("generations.csv"))?;
    crate::report::write_csv(&rows, file)?;
    Ok(())
}

pub fn read_record(path: &Path) -> anyhow::Result<RunRecord> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn summary(record: &RunRecord) -> String {
    let best = record
        .best_fitness
        .map(|f| format!("best validation error {:.2}% with {} hidden", f.validation_error_pct, f.hidden_count))
        .unwrap_or_else(|| "no best individual".into());
    let test = record
        .test_error_pct
        .map(|t| format!("test error {t:.2}%"))
        .unwrap_or_else(|| "test error n/a".into());
    let state = if record.complete { "complete" } else { "INCOMPLETE" };
    format!(
        "{state}: {best}, {test}, {} evaluations in {:.2}s",
        record.total_evaluations,
        record.total_wall_ms / 1e3
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.ea.generations = 2;
        cfg.ea.population_size = 6;
        cfg.ea.epochs_fitness = 10;
        cfg.ea.hidden_bounds = gprop_core::HiddenBounds::new(2, 8).unwrap();
        cfg.ea.operator_config.qp_operator_epochs = 5;
        cfg
    }

    #[test]
    fn local_run_writes_readable_outputs() {
        let record = run_local(&tiny(), false).unwrap();
        assert!(record.complete);
        assert_eq!(record.total_evaluations, 6 + 2 * 2);
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&record, dir.path()).unwrap();
        assert_eq!(read_record(&dir.path().join("run.json")).unwrap(), record);
        let rows: Vec<GenerationRow> =
            crate::report::read_csv(std::fs::File::open(dir.path().join("generations.csv")).unwrap()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].best_validation_error_pct, record.best_fitness.unwrap().validation_error_pct);
        assert!(summary(&record).starts_with("complete: best validation error"));
    }

    #[test]
    fn threaded_local_run_matches_sequential() {
        assert_eq!(
            run_local(&tiny(), true).unwrap().best_fitness_trajectory(),
            run_local(&tiny(), false).unwrap().best_fitness_trajectory()
        );
    }
}
