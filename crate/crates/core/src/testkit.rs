//! Generators, reference models and oracles shared by the test suites.
//! Compiled only with the `testkit` feature.

use std::collections::{HashSet, VecDeque};
use std::fmt::Debug;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sample;
use crate::genome::{Fitness, Genome, GenomeId, HiddenBounds, ProblemDims, MAX_LEARNING_RATE, MIN_LEARNING_RATE};
use crate::matrix::Matrix;
use crate::mlp::{MlpNetwork, TrainReport};
use crate::protocol::*;
use crate::queue::{Claim, JobState, JobStore, QueueError};

// ---------------------------------------------------------------- messages

/// Finite floats of every magnitude, biased towards values with no exact
/// binary representation.
pub fn weight() -> impl Strategy<Value = f64> {
    prop_oneof![
        4 => (-1000i32..1000).prop_map(|k| k as f64 / 10.0),
        4 => -5.0..5.0f64,
        1 => prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
    ]
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z0-9-]{1,24}"
}

fn text() -> impl Strategy<Value = String> {
    any::<String>()
}

pub fn genome() -> impl Strategy<Value = Genome> {
    (1usize..5, 1usize..4, 1usize..4)
        .prop_flat_map(|(h, i, o)| {
            (
                any::<u64>(),
                Just(h),
                prop::collection::vec(weight(), h * (i + 1)),
                Just(i + 1),
                prop::collection::vec(weight(), o * (h + 1)),
                Just(o),
                MIN_LEARNING_RATE..=MAX_LEARNING_RATE,
                any::<u32>(),
            )
        })
        .prop_map(|(id, h, wi, ci, wo, o, lr, born)| Genome {
            genome_id: GenomeId(id),
            hidden_count: h,
            w_ih: Matrix::from_fn(h, ci, |r, c| wi[r * ci + c]),
            w_ho: Matrix::from_fn(o, h + 1, |r, c| wo[r * (h + 1) + c]),
            learning_rate: lr,
            generation_born: born,
        })
}

pub fn fitness() -> impl Strategy<Value = Fitness> {
    (0.0..=100.0f64, 0usize..200).prop_map(|(e, h)| Fitness {
        validation_error_pct: e,
        hidden_count: h,
    })
}

pub fn descriptor() -> impl Strategy<Value = JobDescriptor> {
    (
        prop::option::of(ident()),
        ident(),
        "[0-9a-f]{64}",
        any::<u64>(),
        (1.0..4.0f64, 0.0..1.0f64, 1usize..1000),
        (1usize..10, 0usize..100),
        (1usize..50, 1usize..20),
        (0.05..0.9f64, 0.05..0.9f64),
    )
        .prop_map(|(job_id, name, sum, seed, (mu, decay, epochs), (min, extra), (i, o), (a, b))| {
            // ratios are normalised so that they sum to one within rounding
            let total = 1.0 + a + b;
            let (r0, r1) = (1.0 / total, a / total);
            JobDescriptor {
                job_id,
                dataset_name: name,
                dataset_checksum: sum,
                split_seed: seed,
                split_ratios: [r0, r1, 1.0 - r0 - r1],
                qp: QpParams {
                    mu: mu.max(1.0001),
                    weight_decay: decay,
                    max_epochs: epochs,
                },
                bounds: HiddenBounds { min, max: min + extra },
                problem_dims: ProblemDims { inputs: i, outputs: o },
            }
        })
}

pub fn task() -> impl Strategy<Value = EvaluationTask> {
    (ident(), ident(), genome(), any::<u32>()).prop_map(|(task_id, job_id, genome, generation)| EvaluationTask {
        task_id,
        job_id,
        genome,
        generation,
    })
}

pub fn result() -> impl Strategy<Value = EvaluationResult> {
    (ident(), text(), fitness(), 0usize..10_000, 0.0..10.0f64, any::<u64>(), any::<bool>()).prop_map(
        |(task_id, worker_id, fitness, epochs, mse, ms, diverged)| EvaluationResult {
            task_id,
            worker_id,
            fitness,
            train_report: TrainReport {
                epochs_run: epochs,
                final_train_mse: mse,
            },
            eval_duration_ms: ms,
            diverged,
        },
    )
}

pub fn error_envelope() -> impl Strategy<Value = ErrorEnvelope> {
    let code = prop_oneof![
        Just(ErrorCode::BadRequest),
        Just(ErrorCode::NotFound),
        Just(ErrorCode::Gone),
        Just(ErrorCode::Conflict),
        Just(ErrorCode::Internal),
    ];
    (code, text()).prop_map(|(code, message)| ErrorEnvelope { code, message })
}

pub fn status_view() -> impl Strategy<Value = JobStatusView> {
    (ident(), any::<bool>(), any::<usize>(), any::<usize>(), any::<usize>(), any::<u64>()).prop_map(
        |(job_id, active, pending, in_flight, completed, results)| JobStatusView {
            job_id,
            status: if active { JobStatus::Active } else { JobStatus::Terminated },
            pending,
            in_flight,
            completed,
            results,
        },
    )
}

/// Encodes, decodes and re-encodes `m`, requiring structural equality and
/// byte-identical encodings (so every float survived bit-for-bit).
pub fn round_trip<M: WireMessage + PartialEq + Debug>(m: &M) -> Result<(), String> {
    let bytes = encode(m);
    let back: M = decode(&bytes).map_err(|e| e.to_string())?;
    if &back != m {
        return Err(format!("decoded {back:?} != original {m:?}"));
    }
    if encode(&back) != bytes {
        return Err("re-encoding differs".into());
    }
    Ok(())
}

/// Runs `cases` random instances of every message type through
/// [`round_trip`]. Returns the number of message types checked.
pub fn round_trip_all(cases: u32) -> Result<usize, String> {
    use proptest::test_runner::{Config, TestRunner};
    fn run<M: WireMessage + PartialEq + Debug, S: Strategy<Value = M>>(cases: u32, s: S) -> Result<(), String> {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        runner
            .run(&s, |m| round_trip(&m).map_err(TestCaseError::fail))
            .map_err(|e| format!("{}: {e}", M::KIND))
    }
    run(cases, descriptor())?;
    run(cases, task())?;
    run(cases, result())?;
    run(cases, error_envelope())?;
    run(cases, ident().prop_map(|job_id| CreateJobResponse { job_id }))?;
    run(cases, prop::collection::vec(task(), 0..4).prop_map(|tasks| TaskBatch { tasks }))?;
    run(cases, any::<usize>().prop_map(|accepted| AcceptedCount { accepted }))?;
    run(cases, ident().prop_map(|worker_id| ClaimRequest { worker_id }))?;
    run(cases, any::<bool>().prop_map(|accepted| SubmitAck { accepted }))?;
    run(
        cases,
        (prop::collection::vec(result(), 0..4), any::<u64>()).prop_map(|(results, cursor)| ResultsPage { results, cursor }),
    )?;
    run(cases, status_view())?;
    run(cases, prop::collection::vec(status_view(), 0..4).prop_map(|jobs| JobList { jobs }))?;
    Ok(12)
}

// ------------------------------------------------------------------- queue

fn probe_genome() -> Genome {
    Genome {
        genome_id: GenomeId(0),
        hidden_count: 1,
        w_ih: Matrix::zeros(1, 2),
        w_ho: Matrix::zeros(1, 2),
        learning_rate: 0.1,
        generation_born: 0,
    }
}

pub fn probe_task(job_id: &str, task_id: &str) -> EvaluationTask {
    EvaluationTask {
        task_id: task_id.to_string(),
        job_id: job_id.to_string(),
        genome: probe_genome(),
        generation: 0,
    }
}

pub fn probe_result(task_id: &str, worker_id: &str) -> EvaluationResult {
    EvaluationResult {
        task_id: task_id.to_string(),
        worker_id: worker_id.to_string(),
        fitness: Fitness {
            validation_error_pct: 50.0,
            hidden_count: 1,
        },
        train_report: TrainReport {
            epochs_run: 1,
            final_train_mse: 0.25,
        },
        eval_duration_ms: 0,
        diverged: false,
    }
}

/// Reference semantics of a job queue, kept deliberately naive.
#[derive(Default)]
struct Model {
    terminated: bool,
    /// (seq, id), claim order
    pending: VecDeque<(u64, String)>,
    /// (seq, id, deadline)
    in_flight: Vec<(u64, String, u64)>,
    completed: Vec<String>,
    dropped: Vec<String>,
    results: Vec<String>,
    known: HashSet<String>,
    seq: u64,
}

impl Model {
    fn expire(&mut self, now: u64) -> usize {
        let (mut expired, keep): (Vec<_>, Vec<_>) = self.in_flight.drain(..).partition(|(_, _, d)| *d < now);
        self.in_flight = keep;
        expired.sort();
        let n = expired.len();
        for (seq, id, _) in expired.into_iter().rev() {
            self.pending.push_front((seq, id));
        }
        n
    }
}

#[derive(Clone, Debug)]
pub enum QueueOp {
    Enqueue(Vec<u16>),
    Claim(u8),
    Submit(u16),
    Tick(u64),
    Expire,
    Collect(u64),
    Terminate,
}

pub fn queue_op(id_space: u16) -> impl Strategy<Value = QueueOp> {
    prop_oneof![
        6 => prop::collection::vec(0..id_space, 1..4).prop_map(QueueOp::Enqueue),
        8 => (0u8..4).prop_map(QueueOp::Claim),
        6 => (0..id_space).prop_map(QueueOp::Submit),
        3 => (0u64..40).prop_map(QueueOp::Tick),
        1 => Just(QueueOp::Expire),
        2 => (0u64..64).prop_map(QueueOp::Collect),
        // rare, so most sequences spend their length on an active job
        1 => (0u8..40).prop_filter_map("rare", |x| (x == 0).then_some(QueueOp::Terminate)),
    ]
}

/// Applies `ops` to a [`JobState`] and to a reference model in lockstep,
/// comparing every observable outcome and checking the exactly-one-home and
/// at-most-one-result invariants after each step.
pub fn run_queue_model(ops: &[QueueOp], lease_ms: u64) -> Result<(), String> {
    let desc = JobDescriptor::glass(0);
    let mut q = JobState::new("job", desc, lease_ms);
    let mut m = Model::default();
    let mut now = 0u64;
    for (step, op) in ops.iter().enumerate() {
        let ctx = |msg: String| format!("step {step} ({op:?}): {msg}");
        match op {
            QueueOp::Enqueue(ids) => {
                let tasks: Vec<_> = ids.iter().map(|i| probe_task("job", &format!("t{i}"))).collect();
                let got = q.enqueue(tasks);
                if m.terminated {
                    if !matches!(got, Err(QueueError::Gone(_))) {
                        return Err(ctx(format!("expected gone, got {got:?}")));
                    }
                } else {
                    let mut n = 0;
                    for i in ids {
                        let id = format!("t{i}");
                        if m.known.insert(id.clone()) {
                            m.pending.push_back((m.seq, id));
                            m.seq += 1;
                            n += 1;
                        }
                    }
                    if got != Ok(n) {
                        return Err(ctx(format!("accepted {got:?}, model {n}")));
                    }
                }
            }
            QueueOp::Claim(w) => {
                let got = q.claim(&format!("w{w}"), now);
                let want = if m.terminated {
                    None
                } else {
                    m.expire(now);
                    m.pending.pop_front().map(|(seq, id)| {
                        m.in_flight.push((seq, id.clone(), now + lease_ms.max(1)));
                        id
                    })
                };
                match (&got, want, m.terminated) {
                    (Claim::Terminated, _, true) => {}
                    (Claim::Empty, None, false) => {}
                    (Claim::Task(t), Some(id), false) if t.task_id == id => {}
                    (g, w, _) => return Err(ctx(format!("claim gave {g:?}, model {w:?}"))),
                }
            }
            QueueOp::Submit(i) => {
                let id = format!("t{i}");
                let got = q.submit(probe_result(&id, "w"));
                let want = if m.completed.contains(&id) {
                    Some(false)
                } else if let Some(pos) = m.in_flight.iter().position(|(_, t, _)| *t == id) {
                    m.in_flight.remove(pos);
                    Some(true)
                } else if let Some(pos) = m.pending.iter().position(|(_, t)| *t == id) {
                    m.pending.remove(pos);
                    Some(true)
                } else {
                    None
                };
                if want == Some(true) {
                    m.completed.push(id.clone());
                    m.results.push(id);
                }
                match (got, want) {
                    (Ok(a), Some(b)) if a == b => {}
                    (Err(QueueError::NotFound(_)), None) => {}
                    (g, w) => return Err(ctx(format!("submit gave {g:?}, model {w:?}"))),
                }
            }
            QueueOp::Tick(dt) => now += dt,
            QueueOp::Expire => {
                let a = q.expire_leases(now);
                let b = m.expire(now);
                if a != b {
                    return Err(ctx(format!("expired {a}, model {b}")));
                }
            }
            QueueOp::Collect(after) => {
                let got = q.collect(*after);
                let len = m.results.len() as u64;
                match got {
                    Ok(page) if *after <= len => {
                        let ids: Vec<_> = page.results.iter().map(|r| r.task_id.clone()).collect();
                        if page.cursor != len || ids != m.results[*after as usize..] {
                            return Err(ctx(format!("collect page {ids:?}/{}", page.cursor)));
                        }
                    }
                    Err(QueueError::BadRequest(_)) if *after > len => {}
                    other => return Err(ctx(format!("collect gave {other:?}"))),
                }
            }
            QueueOp::Terminate => {
                q.terminate();
                m.terminated = true;
                let drained: Vec<_> = m.pending.drain(..).map(|(_, id)| id).collect();
                m.dropped.extend(drained);
            }
        }
        q.check_invariants().map_err(ctx)?;
        if q.pending_len() != m.pending.len()
            || q.in_flight_len() != m.in_flight.len()
            || q.completed_len() != m.completed.len()
        {
            return Err(ctx(format!(
                "sizes {}/{}/{} vs model {}/{}/{}",
                q.pending_len(),
                q.in_flight_len(),
                q.completed_len(),
                m.pending.len(),
                m.in_flight.len(),
                m.completed.len()
            )));
        }
        let homes = m.pending.len() + m.in_flight.len() + m.completed.len() + m.dropped.len();
        if homes != m.known.len() {
            return Err(ctx("model lost a task".into()));
        }
    }
    Ok(())
}

/// Generates `sequences` random operation sequences of `len` operations
/// each (seeded) and checks each against the model. Returns the total
/// number of operations applied.
pub fn queue_model_check(seed: u64, sequences: usize, len: usize) -> Result<usize, String> {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
    let bytes: Vec<u8> = seed.to_le_bytes().iter().cycle().take(32).copied().collect();
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::from_seed(RngAlgorithm::ChaCha, &bytes));
    let strategy = prop::collection::vec(queue_op(24), len);
    let mut total = 0;
    for i in 0..sequences {
        let ops = strategy
            .new_tree(&mut runner)
            .map_err(|e| e.to_string())?
            .current();
        let lease = [5, 20, 1000][i % 3];
        run_queue_model(&ops, lease).map_err(|e| format!("sequence {i}: {e}"))?;
        total += ops.len();
    }
    Ok(total)
}

/// Many threads claim from one job until it runs dry. Returns the number
/// of tasks claimed, or an error naming a task issued twice.
pub fn concurrent_claim_stress(tasks: usize, threads: usize) -> Result<usize, String> {
    let store = Arc::new(JobStore::new());
    let job = store
        .create_job(JobDescriptor::glass(0), 3_600_000)
        .map_err(|e| e.to_string())?;
    let batch: Vec<_> = (0..tasks).map(|i| probe_task(&job, &format!("t{i}"))).collect();
    store.enqueue(&job, batch).map_err(|e| e.to_string())?;
    let handles: Vec<_> = (0..threads)
        .map(|w| {
            let store = store.clone();
            let job = job.clone();
            std::thread::spawn(move || {
                let mut got = Vec::new();
                let worker = format!("w{w}");
                while let Ok(Claim::Task(t)) = store.claim(&job, &worker) {
                    // every other task is submitted straight away
                    if got.len() % 2 == 0 {
                        store.submit(&job, probe_result(&t.task_id, &worker)).unwrap();
                    }
                    got.push(t.task_id);
                }
                got
            })
        })
        .collect();
    let mut seen = HashSet::new();
    for h in handles {
        for id in h.join().map_err(|_| "claim thread panicked".to_string())? {
            if !seen.insert(id.clone()) {
                return Err(format!("task {id} was issued twice"));
            }
        }
    }
    let state = store.job(&job).map_err(|e| e.to_string())?;
    state.lock().check_invariants()?;
    if seen.len() != tasks {
        return Err(format!("claimed {} of {tasks} tasks", seen.len()));
    }
    Ok(seen.len())
}

// -------------------------------------------------------------------- mlp

/// Random small network and sample set drawn from `seed`.
pub fn small_problem(seed: u64) -> (MlpNetwork, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in = rng.random_range(1..=4);
    let n_hid = rng.random_range(1..=4);
    let n_out = rng.random_range(2..=3);
    let w_ih = Matrix::from_fn(n_hid, n_in + 1, |_, _| rng.random_range(-1.5..1.5));
    let w_ho = Matrix::from_fn(n_out, n_hid + 1, |_, _| rng.random_range(-1.5..1.5));
    let n = rng.random_range(1..=5);
    let samples = (0..n)
        .map(|_| Sample {
            features: (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
            class_index: rng.random_range(0..n_out),
        })
        .collect();
    (MlpNetwork::from_weights(w_ih, w_ho).expect("shapes agree"), samples)
}

/// Largest componentwise `|analytic - numeric| / max(1, |analytic|)` for
/// the network from [`small_problem`], using central differences.
pub fn gradient_check(seed: u64) -> f64 {
    let (net, samples) = small_problem(seed);
    let analytic: Vec<f64> = net.batch_gradient(&samples).expect("valid samples").iter().collect();
    let (w_ih, w_ho) = net.into_weights();
    let n_ih = w_ih.as_slice().len();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let loss_at = |d: f64| {
            let (mut wi, mut wo) = (w_ih.clone(), w_ho.clone());
            if i < n_ih {
                wi.as_mut_slice()[i] += d;
            } else {
                wo.as_mut_slice()[i - n_ih] += d;
            }
            MlpNetwork::from_weights(wi, wo).unwrap().loss(&samples).unwrap()
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    worst
}

/// XOR samples and the pinned starting weights of a 2-2-1 network.
pub fn xor_problem() -> (MlpNetwork, Vec<Sample>) {
    let samples = [([0.0, 0.0], 0), ([0.0, 1.0], 1), ([1.0, 0.0], 1), ([1.0, 1.0], 0)]
        .iter()
        .map(|(f, c)| Sample {
            features: f.to_vec(),
            class_index: *c,
        })
        .collect();
    let w_ih = Matrix::from_rows(vec![
        vec![0.41815083085312343, -0.0681565554207797, 0.3982864853494634],
        vec![-0.8796576687316566, 0.7582214359172372, 0.09906253757889294],
    ])
    .expect("rectangular");
    let w_ho = Matrix::from_rows(vec![vec![0.6579689520479985, 0.870853005826258, 0.6075632844559271]]).expect("rectangular");
    (MlpNetwork::from_weights(w_ih, w_ho).expect("shapes agree"), samples)
}
