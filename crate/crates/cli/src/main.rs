use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gprop_cli::bench::{self, BenchConfig, Farm};
use gprop_cli::report::{self, RepRecord};
use gprop_cli::run::{self, RemoteOptions};
use gprop_cli::{fetch, RunConfig};
use gprop_net::server::{self, AppState, LeasePolicy, ServerConfig};
use gprop_net::worker::{self, WorkerConfig, WorkerError};

/// Exit code for runs that finished but failed (incomplete run, failed rep).
const EXIT_FAILED: u8 = 1;
/// Exit code for bad arguments, config or input files.
const EXIT_USAGE: u8 = 2;
/// Exit code for a worker that lost the server.
const EXIT_UNREACHABLE: u8 = 3;

#[derive(Parser)]
#[command(name = "gprop", version, about = "Evolve MLPs for the Glass problem, locally or farmed over HTTP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordination server.
    Serve(ServeArgs),
    /// Evaluate tasks for a job, or for every job the server opens.
    Worker(WorkerArgs),
    /// Run the EA, farming evaluations out through a server.
    Master(MasterArgs),
    /// Run the EA in this process.
    RunLocal(RunLocalArgs),
    /// Measure wall time and speedup across worker counts.
    Bench(BenchArgs),
    /// Inspect or download the dataset.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "GPROP_PORT", default_value_t = server::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Fixed lease in milliseconds; by default it is measured per job.
    #[arg(long)]
    lease_ms: Option<u64>,
    /// Append-only job journal, replayed on start.
    #[arg(long, env = "GPROP_JOURNAL")]
    journal: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, default_value = "http://127.0.0.1:3000")]
    server: String,
    /// Job to serve. Without it the worker follows the server's jobs.
    #[arg(long)]
    job: Option<String>,
    #[arg(long)]
    id: Option<String>,
    /// Concurrent claim loops.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Local dataset copy; must match the job's checksum.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    initial_backoff_ms: u64,
    #[arg(long, default_value_t = 2000)]
    max_backoff_ms: u64,
    /// In follow mode, exit after this many jobs.
    #[arg(long)]
    max_jobs: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; defaults to the full-size settings.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: "full" or "desk".
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for run.json and generations.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MasterArgs {
    #[arg(long, default_value = "http://127.0.0.1:3000")]
    server: String,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 200)]
    poll_ms: u64,
    /// Abort if no result arrives for this many seconds.
    #[arg(long)]
    stall_timeout_s: Option<u64>,
    /// Write the job id here once the job exists.
    #[arg(long)]
    job_id_file: Option<PathBuf>,
}

#[derive(Args)]
struct RunLocalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Evaluate each batch on all cores.
    #[arg(long)]
    threads: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    no_sequential: bool,
    #[arg(long, default_value_t = 2024)]
    bench_seed: u64,
    /// Use this server, with workers already attached in follow mode,
    /// instead of spawning them. Measures one worker count (`--workers N`).
    #[arg(long)]
    remote: Option<String>,
    /// Skip running; re-aggregate these rep CSVs (from earlier benches).
    #[arg(long, num_args = 1..)]
    from_csv: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Print sample and class counts, checksum and split sizes.
    Inspect {
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        split_seed: u64,
    },
    /// Download a copy of the data and verify that it parses.
    Fetch {
        #[arg(long, default_value = fetch::UCI_GLASS_URL)]
        url: String,
        #[arg(long, default_value = "glass.data")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // per-generation progress from dozens of bench runs is noise
    let default_level = if matches!(cli.command, Command::Bench(_)) { "warn" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_level.into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Worker(a) => worker(a),
        Command::Master(a) => master(a),
        Command::RunLocal(a) => run_local(a),
        Command::Bench(a) => bench(a),
        Command::Dataset(c) => dataset(c),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn load_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name).with_context(|| format!("unknown preset {name:?}"))?,
        (None, None) => RunConfig::full(),
    };
    if let Some(seed) = a.seed {
        cfg.ea.master_seed = seed;
    }
    Ok(cfg)
}

fn serve(a: ServeArgs) -> anyhow::Result<u8> {
    let cfg = ServerConfig {
        host: a.bind.clone(),
        port: a.port,
        lease: a.lease_ms.map(|ms| LeasePolicy::Fixed { ms }).unwrap_or_default(),
        journal: a.journal,
        ..Default::default()
    };
    let state = Arc::new(AppState::open(&cfg)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.bind.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.bind, a.port))?;
        let addr: SocketAddr = listener.local_addr()?;
        let shown = if addr.ip().is_unspecified() {
            format!("127.0.0.1:{}", addr.port())
        } else {
            addr.to_string()
        };
        println!("listening on http://{shown}");
        std::io::stdout().flush()?;
        server::serve(listener, state, cfg.expiry_interval, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(0)
    })
}

fn worker(a: WorkerArgs) -> anyhow::Result<u8> {
    let mut cfg = WorkerConfig::new(a.server, a.job.clone().unwrap_or_default());
    if let Some(id) = a.id {
        cfg.worker_id = id;
    }
    cfg.parallel = a.parallel;
    cfg.dataset_path = a.dataset;
    cfg.initial_backoff = Duration::from_millis(a.initial_backoff_ms);
    cfg.max_backoff = Duration::from_millis(a.max_backoff_ms);
    let outcome = match a.job {
        Some(_) => worker::run_worker(&cfg),
        None => {
            cfg.job_id = "follow".into();
            cfg.validate().and_then(|_| worker::follow(&cfg, a.max_jobs))
        }
    };
    match outcome {
        Ok(s) => {
            println!("claimed {} submitted {} duplicates {}", s.claimed, s.submitted, s.rejected);
            Ok(0)
        }
        Err(e @ WorkerError::Unreachable { .. }) => {
            eprintln!("error: {e}");
            Ok(EXIT_UNREACHABLE)
        }
        Err(e @ WorkerError::InjectedCrash(_)) => {
            eprintln!("error: {e}");
            Ok(EXIT_FAILED)
        }
        Err(e) => Err(e.into()),
    }
}

fn finish_run(record: &gprop_core::RunRecord, out: Option<&Path>) -> anyhow::Result<u8> {
    if let Some(dir) = out {
        run::write_outputs(record, dir)?;
    }
    println!("{}", run::summary(record));
    if let Some(e) = &record.error {
        eprintln!("error: {e}");
    }
    Ok(if record.complete { 0 } else { EXIT_FAILED })
}

fn master(a: MasterArgs) -> anyhow::Result<u8> {
    let cfg = load_config(&a.run)?;
    let opts = RemoteOptions {
        poll_interval: Duration::from_millis(a.poll_ms),
        stall_timeout: a.stall_timeout_s.map(Duration::from_secs),
    };
    let record = run::run_remote(&cfg, &a.server, &opts, |job| {
        tracing::info!(job, "job created");
        if let Some(path) = &a.job_id_file {
            std::fs::write(path, job).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    })?;
    finish_run(&record, a.run.out.as_deref())
}

fn run_local(a: RunLocalArgs) -> anyhow::Result<u8> {
    let cfg = load_config(&a.run)?;
    let record = run::run_local(&cfg, a.threads)?;
    finish_run(&record, a.run.out.as_deref())
}

fn bench(a: BenchArgs) -> anyhow::Result<u8> {
    let out = a.run.out.clone().unwrap_or_else(|| PathBuf::from("bench-out"));
    let reps: Vec<RepRecord> = if !a.from_csv.is_empty() {
        let mut all = Vec::new();
        for path in &a.from_csv {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            all.extend(report::read_csv::<RepRecord, _>(file)?);
        }
        all
    } else {
        let farm = match &a.remote {
            Some(url) => {
                let [n] = a.workers[..] else {
                    bail!("--remote measures one worker count; pass --workers N");
                };
                Farm::Remote {
                    url: url.clone(),
                    workers: n,
                }
            }
            None => Farm::Local {
                exe: std::env::current_exe()?,
            },
        };
        let cfg = BenchConfig {
            worker_counts: a.workers.clone(),
            repetitions: a.reps,
            run: match (&a.run.config, &a.run.preset) {
                (None, None) => RunConfig::desk(),
                _ => load_config(&a.run)?,
            },
            include_sequential: !a.no_sequential,
            bench_seed: a.bench_seed,
            ..Default::default()
        };
        bench::run_bench(&cfg, &farm, |r| {
            eprintln!(
                "{:>10} rep {} seed {:>20}  {:8.2}s  test error {}{}",
                r.mode.to_string(),
                r.rep,
                r.seed,
                r.wall_s,
                r.test_error_pct.map_or("n/a".into(), |e| format!("{e:.2}%")),
                if r.ok { "" } else { "  FAILED" }
            );
        })?
    };
    let rows = bench::write_bench_outputs(&reps, &out)?;
    print!("{}", report::render_table(&rows));
    println!("outputs in {}", out.display());
    Ok(if reps.iter().all(|r| r.ok) { 0 } else { EXIT_FAILED })
}

fn dataset(c: DatasetCommand) -> anyhow::Result<u8> {
    match c {
        DatasetCommand::Inspect { path, split_seed } => print!("{}", fetch::inspect(path.as_deref(), split_seed)?),
        DatasetCommand::Fetch { url, out } => {
            let sum = fetch::fetch(&url, &out)?;
            println!("wrote {} (sha256 {sum})", out.display());
        }
    }
    Ok(0)
}
