//! Speedup harness: repeated EA runs per mode, sequential in-process or
//! farmed to worker processes through a server.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::report::{self, BenchRow, Mode, RepRecord};
use crate::run::{self, RemoteOptions};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub worker_counts: Vec<usize>,
    pub repetitions: usize,
    pub run: RunConfig,
    pub include_sequential: bool,
    /// Seeds every rep's master seed; rep `r` uses the same seed in every mode.
    pub bench_seed: u64,
    pub poll_interval: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            worker_counts: vec![1, 2, 3, 4],
            repetitions: 5,
            run: RunConfig::desk(),
            include_sequential: true,
            bench_seed: 2024,
            poll_interval: Duration::from_millis(20),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.worker_counts.is_empty() || self.worker_counts.contains(&0) {
            bail!("worker counts must be non-empty and all at least 1");
        }
        if self.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        self.run.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.bench_seed);
        (0..self.repetitions).map(|_| rng.random()).collect()
    }
}

/// Where farmed runs get their workers.
#[derive(Clone, Debug)]
pub enum Farm {
    /// Spawn a server and `n` workers from this executable for each mode.
    Local { exe: PathBuf },
    /// Use a running server with `workers` workers already attached in
    /// follow mode; only that one worker count is measured.
    Remote { url: String, workers: usize },
}

/// Server plus worker processes on this host; killed on drop.
pub struct LocalCluster {
    pub url: String,
    server: Child,
    workers: Vec<Child>,
}

impl LocalCluster {
    pub fn start(exe: &Path, workers: usize, server_args: &[&str]) -> anyhow::Result<Self> {
        let (server, url) = spawn_server(exe, server_args)?;
        let mut cluster = Self {
            url,
            server,
            workers: Vec::new(),
        };
        for i in 0..workers {
            let child = worker_command(exe, &cluster.url, None)
                .args(["--id", &format!("bench-w{i}")])
                .spawn()
                .context("spawning worker")?;
            cluster.workers.push(child);
        }
        Ok(cluster)
    }

    pub fn worker_mut(&mut self, i: usize) -> &mut Child {
        &mut self.workers[i]
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for c in self.workers.iter_mut().chain(std::iter::once(&mut self.server)) {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Starts `exe serve --port 0 ARGS` and reads the URL it announces.
pub fn spawn_server(exe: &Path, args: &[&str]) -> anyhow::Result<(Child, String)> {
    let mut child = Command::new(exe)
        .args(["serve", "--port", "0"])
        .args(args)
        .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()))
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .with_context(|| format!("spawning {}", exe.display()))?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().expect("piped stdout")).read_line(&mut line)?;
    match line.trim().strip_prefix("listening on ") {
        Some(url) => Ok((child, url.to_string())),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            bail!("server did not announce its address (got {line:?})")
        }
    }
}

/// `exe worker` with short backoffs, following jobs unless `job` is given.
pub fn worker_command(exe: &Path, url: &str, job: Option<&str>) -> Command {
    let mut cmd = Command::new(exe);
    cmd.args(["worker", "--server", url, "--initial-backoff-ms", "5", "--max-backoff-ms", "20"])
        .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()))
        .stdout(Stdio::null())
        .stderr(Stdio::inherit());
    if let Some(job) = job {
        cmd.args(["--job", job]);
    }
    cmd
}

fn timed_rep(mode: Mode, rep: usize, seed: u64, f: impl FnOnce() -> anyhow::Result<gprop_core::RunRecord>) -> RepRecord {
    let started = Instant::now();
    let outcome = f();
    let wall_s = started.elapsed().as_secs_f64();
    match outcome {
        Ok(r) => RepRecord {
            mode,
            rep,
            seed,
            wall_s,
            test_error_pct: r.test_error_pct,
            ok: r.complete,
        },
        Err(e) => {
            tracing::error!(%mode, rep, "run failed: {e:#}");
            RepRecord {
                mode,
                rep,
                seed,
                wall_s,
                test_error_pct: None,
                ok: false,
            }
        }
    }
}

/// Runs every mode `repetitions` times, reporting each rep as it finishes.
pub fn run_bench(cfg: &BenchConfig, farm: &Farm, mut on_rep: impl FnMut(&RepRecord)) -> anyhow::Result<Vec<RepRecord>> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let with_seed = |seed: u64| {
        let mut run = cfg.run.clone();
        run.ea.master_seed = seed;
        run
    };
    let opts = RemoteOptions {
        poll_interval: cfg.poll_interval,
        stall_timeout: None,
    };
    let mut out = Vec::new();
    if cfg.include_sequential {
        for (rep, &seed) in seeds.iter().enumerate() {
            let r = timed_rep(Mode::Sequential, rep, seed, || run::run_local(&with_seed(seed), false));
            on_rep(&r);
            out.push(r);
        }
    }
    let counts = match farm {
        Farm::Local { .. } => cfg.worker_counts.clone(),
        Farm::Remote { workers, .. } => vec![*workers],
    };
    for n in counts {
        let mode = Mode::Workers(n);
        let cluster = match farm {
            Farm::Local { exe } => Some(LocalCluster::start(exe, n, &["--lease-ms", "600000"])?),
            Farm::Remote { .. } => None,
        };
        let url = match (&cluster, farm) {
            (Some(c), _) => c.url.clone(),
            (None, Farm::Remote { url, .. }) => url.clone(),
            (None, Farm::Local { .. }) => unreachable!(),
        };
        for (rep, &seed) in seeds.iter().enumerate() {
            let r = timed_rep(mode, rep, seed, || run::run_remote(&with_seed(seed), &url, &opts, |_| Ok(())));
            on_rep(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Writes `reps.csv`, `summary.csv`, `speedup.dat` and `speedup.gp`.
pub fn write_bench_outputs(reps: &[RepRecord], dir: &Path) -> anyhow::Result<Vec<BenchRow>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows = report::aggregate(reps);
    report::write_csv(reps, std::fs::File::create(dir.join("reps.csv"))?)?;
    report::write_csv(&rows, std::fs::File::create(dir.join("summary.csv"))?)?;
    std::fs::write(dir.join("speedup.dat"), report::gnuplot_data(&rows))?;
    std::fs::write(dir.join("speedup.gp"), report::GNUPLOT_SCRIPT)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = BenchConfig::default();
        assert!(c.validate().is_ok());
        c.worker_counts = vec![];
        assert!(c.validate().is_err());
        c.worker_counts = vec![1, 0];
        assert!(c.validate().is_err());
        let c = BenchConfig {
            repetitions: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_are_fresh_and_reproducible() {
        let c = BenchConfig::default();
        let s = c.seeds();
        assert_eq!(s.len(), 5);
        assert_eq!(s, c.seeds());
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
    }

    #[test]
    fn sequential_reps_with_one_seed_have_zero_error_spread() {
        let mut run = RunConfig::desk();
        run.ea.generations = 1;
        run.ea.population_size = 4;
        run.ea.epochs_fitness = 5;
        run.ea.operator_config.qp_operator_epochs = 2;
        let cfg = BenchConfig {
            repetitions: 3,
            include_sequential: true,
            run,
            ..Default::default()
        };
        let seed = cfg.seeds()[0];
        let reps: Vec<RepRecord> = (0..3)
            .map(|rep| {
                timed_rep(Mode::Sequential, rep, seed, || {
                    let mut r = cfg.run.clone();
                    r.ea.master_seed = seed;
                    run::run_local(&r, false)
                })
            })
            .collect();
        let rows = report::aggregate(&reps);
        assert_eq!(rows[0].reps, 3);
        assert_eq!(rows[0].stddev_error, 0.0);
        assert_eq!(rows[0].speedup_vs_sequential, Some(1.0));
    }
}
