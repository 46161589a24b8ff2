use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use gprop_core::ea::{self, EaConfig, Evaluator, LocalEvaluator};
use gprop_core::genome::random_genome;
use gprop_core::{evaluate_genome, EvalContext, HiddenBounds, JobDescriptor, OperatorConfig};
use gprop_net::worker::WorkerError;
use gprop_net::{
    run_worker, ClaimOutcome, Client, LeasePolicy, RemoteEvaluator, ServerConfig, ServerHandle, WorkerConfig,
    WorkerSummary,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn descriptor() -> JobDescriptor {
    let mut d = JobDescriptor::glass(4);
    d.qp.max_epochs = 6;
    d.bounds = HiddenBounds::new(2, 6).unwrap();
    d
}

fn spawn_server(lease_ms: u64, port: u16, journal: Option<PathBuf>) -> ServerHandle {
    ServerHandle::spawn(ServerConfig {
        host: "127.0.0.1".into(),
        port,
        lease: LeasePolicy::Fixed { ms: lease_ms },
        journal,
        expiry_interval: Duration::from_millis(20),
    })
    .unwrap()
}

fn worker_cfg(url: &str, job: &str, id: &str) -> WorkerConfig {
    let mut w = WorkerConfig::new(url, job);
    w.worker_id = id.into();
    w.initial_backoff = Duration::from_millis(5);
    w.max_backoff = Duration::from_millis(40);
    w
}

fn spawn_worker(cfg: WorkerConfig) -> JoinHandle<Result<WorkerSummary, WorkerError>> {
    std::thread::spawn(move || run_worker(&cfg))
}

fn remote(url: &str, job: &str) -> RemoteEvaluator {
    let mut r = RemoteEvaluator::attach(Client::new(url).unwrap(), job);
    r.poll_interval = Duration::from_millis(10);
    r.stall_timeout = Some(Duration::from_secs(60));
    r
}

#[test]
fn batch_of_30_with_3_workers_restores_order() {
    let server = spawn_server(60_000, 0, None);
    let client = Client::new(&server.url()).unwrap();
    let job = client.create_job(&descriptor()).unwrap();
    let workers: Vec<_> = (0..3)
        .map(|i| spawn_worker(worker_cfg(&server.url(), &job, &format!("w{i}"))))
        .collect();

    let ctx = EvalContext::build(&descriptor(), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let genomes: Vec<_> = (0..30)
        .map(|_| random_genome(&mut rng, ctx.descriptor.problem_dims, ctx.descriptor.bounds).unwrap())
        .collect();
    let mut ev = remote(&server.url(), &job);
    assert!(ev.evaluate(0, &[]).unwrap().is_empty());
    let got = ev.evaluate(1, &genomes).unwrap();
    let want: Vec<_> = genomes.iter().map(|g| evaluate_genome(&ctx, g)).collect();
    assert_eq!(got, want);

    let page = client.collect(&job, 0).unwrap();
    let ids: HashSet<_> = page.results.iter().map(|r| r.task_id.clone()).collect();
    assert_eq!((page.results.len(), ids.len()), (30, 30));

    ev.finish().unwrap();
    let summaries: Vec<_> = workers.into_iter().map(|w| w.join().unwrap().unwrap()).collect();
    assert_eq!(summaries.iter().map(|s| s.submitted).sum::<usize>(), 30);
}

#[test]
fn worker_exits_cleanly_on_terminated_job() {
    let server = spawn_server(60_000, 0, None);
    let client = Client::new(&server.url()).unwrap();
    let job = client.create_job(&descriptor()).unwrap();
    client.terminate(&job).unwrap();
    let summary = run_worker(&worker_cfg(&server.url(), &job, "w")).unwrap();
    assert_eq!(summary, WorkerSummary::default());
}

#[test]
fn worker_rejects_unknown_job_and_unreachable_server() {
    let server = spawn_server(60_000, 0, None);
    assert!(matches!(
        run_worker(&worker_cfg(&server.url(), "missing", "w")),
        Err(WorkerError::Rejected(_))
    ));
    let url = server.url();
    drop(server);
    let mut cfg = worker_cfg(&url, "job", "w");
    cfg.max_transport_failures = 3;
    assert!(matches!(run_worker(&cfg), Err(WorkerError::Unreachable { .. })));
}

#[test]
fn parallel_worker_loops_share_one_context() {
    let server = spawn_server(60_000, 0, None);
    let client = Client::new(&server.url()).unwrap();
    let job = client.create_job(&descriptor()).unwrap();
    let mut cfg = worker_cfg(&server.url(), &job, "multi");
    cfg.parallel = 3;
    let w = spawn_worker(cfg);
    let ctx = EvalContext::build(&descriptor(), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let genomes: Vec<_> = (0..12)
        .map(|_| random_genome(&mut rng, ctx.descriptor.problem_dims, ctx.descriptor.bounds).unwrap())
        .collect();
    let mut ev = remote(&server.url(), &job);
    ev.evaluate(0, &genomes).unwrap();
    ev.finish().unwrap();
    assert_eq!(w.join().unwrap().unwrap().submitted, 12);
    let workers: HashSet<_> = client.collect(&job, 0).unwrap().results.into_iter().map(|r| r.worker_id).collect();
    assert!(workers.iter().all(|w| w.starts_with("multi-")));
}

fn small_ea() -> (EaConfig, JobDescriptor) {
    let cfg = EaConfig {
        generations: 3,
        population_size: 6,
        replacement_fraction: 0.5,
        hidden_bounds: HiddenBounds::new(2, 6).unwrap(),
        epochs_fitness: 6,
        operator_config: OperatorConfig {
            qp_operator_epochs: 3,
            ..Default::default()
        },
        master_seed: 99,
    };
    (cfg, descriptor())
}

#[test]
fn crashed_worker_tasks_are_reissued_and_run_matches_local() {
    let (cfg, desc) = small_ea();
    let ctx = Arc::new(EvalContext::build(&desc, None).unwrap());
    let local = ea::run_ea(&cfg, &ctx, &mut LocalEvaluator::new(ctx.clone())).unwrap();

    let server = spawn_server(300, 0, None);
    let client = Client::new(&server.url()).unwrap();
    let job = client.create_job(&desc).unwrap();
    let mut doomed = worker_cfg(&server.url(), &job, "doomed");
    doomed.crash_after_claims = Some(2);
    let doomed = spawn_worker(doomed);
    let healthy = spawn_worker(worker_cfg(&server.url(), &job, "healthy"));

    let record = ea::run_ea(&cfg, &ctx, &mut remote(&server.url(), &job)).unwrap();
    assert!(record.complete, "{:?}", record.error);
    assert!(matches!(doomed.join().unwrap(), Err(WorkerError::InjectedCrash(2))));
    healthy.join().unwrap().unwrap();

    assert_eq!(record.best_fitness_trajectory(), local.best_fitness_trajectory());
    assert_eq!(record.best_genome, local.best_genome);
    assert_eq!(record.test_error_pct, local.test_error_pct);

    let page = client.collect(&job, 0).unwrap();
    let ids: HashSet<_> = page.results.iter().map(|r| r.task_id.clone()).collect();
    assert_eq!(page.results.len(), cfg.total_evaluations());
    assert_eq!(ids.len(), cfg.total_evaluations());
}

#[test]
fn server_restart_with_journal_is_survived() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let server = spawn_server(60_000, port, Some(journal.clone()));
    let url = server.url();
    let client = Client::new(&url).unwrap();
    let job = client.create_job(&descriptor()).unwrap();

    let ctx = EvalContext::build(&descriptor(), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tasks: Vec<_> = (0..10)
        .map(|i| gprop_core::EvaluationTask {
            task_id: format!("t{i}"),
            job_id: job.clone(),
            genome: random_genome(&mut rng, ctx.descriptor.problem_dims, ctx.descriptor.bounds).unwrap(),
            generation: 0,
        })
        .collect();
    client.enqueue(&job, tasks.clone()).unwrap();
    for _ in 0..3 {
        let ClaimOutcome::Task(t) = client.claim(&job, "manual").unwrap() else { panic!() };
        client.submit(&job, &gprop_core::evaluate_task(&ctx, &t, "manual")).unwrap();
    }
    // one task is claimed and never answered; the restart must forget the lease
    assert!(matches!(client.claim(&job, "ghost").unwrap(), ClaimOutcome::Task(_)));
    server.shutdown().unwrap();

    let mut wcfg = worker_cfg(&url, &job, "survivor");
    wcfg.max_transport_failures = 200;
    let worker = spawn_worker(wcfg);
    std::thread::sleep(Duration::from_millis(300));
    let server = spawn_server(60_000, port, Some(journal.clone()));

    let mut results = Vec::new();
    for _ in 0..2000 {
        results = client.collect(&job, 0).unwrap().results;
        if results.len() == 10 {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(results.len(), 10);
    assert!(results[..3].iter().all(|r| r.worker_id == "manual"));
    assert!(results[3..].iter().all(|r| r.worker_id == "survivor"));
    let ids: HashSet<_> = results.iter().map(|r| r.task_id.clone()).collect();
    assert_eq!(ids.len(), 10);
    client.terminate(&job).unwrap();
    assert_eq!(worker.join().unwrap().unwrap().submitted, 7);
    drop(server);

    // a third incarnation sees the terminated job with every result
    let server = spawn_server(60_000, 0, Some(journal));
    let c = Client::new(&server.url()).unwrap();
    assert_eq!(c.claim(&job, "late").unwrap(), ClaimOutcome::Terminated);
    assert_eq!(c.collect(&job, 0).unwrap().results.len(), 10);
}

#[test]
fn follow_mode_serves_successive_jobs() {
    let server = spawn_server(60_000, 0, None);
    let client = Client::new(&server.url()).unwrap();
    let cfg = worker_cfg(&server.url(), "", "f");
    let w = std::thread::spawn(move || gprop_net::follow(&cfg, Some(2)));

    let ctx = EvalContext::build(&descriptor(), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut jobs = Vec::new();
    for n in [4, 3] {
        let genomes: Vec<_> = (0..n)
            .map(|_| random_genome(&mut rng, ctx.descriptor.problem_dims, ctx.descriptor.bounds).unwrap())
            .collect();
        let mut ev = RemoteEvaluator::create(Client::new(&server.url()).unwrap(), &descriptor()).unwrap();
        ev.poll_interval = Duration::from_millis(10);
        ev.stall_timeout = Some(Duration::from_secs(60));
        let got = ev.evaluate(0, &genomes).unwrap();
        assert_eq!(got, genomes.iter().map(|g| evaluate_genome(&ctx, g)).collect::<Vec<_>>());
        ev.finish().unwrap();
        jobs.push(ev.job_id().to_string());
    }
    assert_eq!(w.join().unwrap().unwrap().submitted, 7);
    let listed: Vec<_> = client.list_jobs().unwrap().jobs.into_iter().map(|j| j.job_id).collect();
    assert_eq!(listed, jobs);
}
