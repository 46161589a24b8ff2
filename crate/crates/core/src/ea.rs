//! Master-side evolutionary loop.
//!
//! The whole algorithm runs here; only fitness evaluation goes through the
//! [`Evaluator`] contract, which may be in-process or remote. Each
//! generation dispatches one batch and waits for all of it before
//! replacement (a synchronous barrier), so the sequence of genomes and
//! fitness values depends only on the master seed.

use std::cmp::Ordering;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalContext, Evaluation};
use crate::genome::{
    self, fitness_compare, Fitness, Genome, HiddenBounds, OperatorConfig, OperatorStatus,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EaError {
    #[error("invalid EA config: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("evaluator failed: {0}")]
pub struct EvaluatorError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EaConfig {
    pub generations: u32,
    pub population_size: usize,
    pub replacement_fraction: f64,
    pub hidden_bounds: HiddenBounds,
    pub epochs_fitness: usize,
    pub operator_config: OperatorConfig,
    pub master_seed: u64,
}

impl Default for EaConfig {
    fn default() -> Self {
        Self {
            generations: 100,
            population_size: 100,
            replacement_fraction: 0.30,
            hidden_bounds: HiddenBounds::default(),
            epochs_fitness: 300,
            operator_config: OperatorConfig::default(),
            master_seed: 1,
        }
    }
}

impl EaConfig {
    /// The reduced setting used for benchmarks and equivalence checks.
    pub fn desk_scale() -> Self {
        Self {
            generations: 10,
            population_size: 30,
            epochs_fitness: 150,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EaError> {
        if !(self.replacement_fraction > 0.0 && self.replacement_fraction < 1.0) {
            return Err(EaError::Config("replacement_fraction must be in (0, 1)".into()));
        }
        if self.population_size < 2 {
            return Err(EaError::Config("population_size must be at least 2".into()));
        }
        if self.generations == 0 {
            return Err(EaError::Config("generations must be at least 1".into()));
        }
        if self.epochs_fitness == 0 {
            return Err(EaError::Config("epochs_fitness must be at least 1".into()));
        }
        self.hidden_bounds
            .validate()
            .map_err(|e| EaError::Config(e.to_string()))?;
        self.operator_config
            .validate()
            .map_err(|e| EaError::Config(e.to_string()))
    }

    /// Offspring per generation: `round(fraction * population)`, kept in
    /// `[1, population - 1]`.
    pub fn offspring_per_generation(&self) -> usize {
        let r = (self.replacement_fraction * self.population_size as f64).round() as usize;
        r.clamp(1, self.population_size - 1)
    }

    pub fn total_evaluations(&self) -> usize {
        self.population_size + self.generations as usize * self.offspring_per_generation()
    }
}

/// Batch fitness evaluation. Implementations return one evaluation per
/// genome, in the order given.
pub trait Evaluator {
    fn evaluate(&mut self, generation: u32, genomes: &[Genome]) -> Result<Vec<Evaluation>, EvaluatorError>;

    /// Called once when the run ends, successfully or not.
    fn finish(&mut self) -> Result<(), EvaluatorError> {
        Ok(())
    }
}

/// In-process evaluator, one genome at a time.
pub struct LocalEvaluator {
    ctx: Arc<EvalContext>,
}

impl LocalEvaluator {
    pub fn new(ctx: Arc<EvalContext>) -> Self {
        Self { ctx }
    }
}

impl Evaluator for LocalEvaluator {
    fn evaluate(&mut self, _generation: u32, genomes: &[Genome]) -> Result<Vec<Evaluation>, EvaluatorError> {
        Ok(genomes.iter().map(|g| eval::evaluate_genome(&self.ctx, g)).collect())
    }
}

/// In-process evaluator spreading a batch over the rayon thread pool.
pub struct ParallelLocalEvaluator {
    ctx: Arc<EvalContext>,
}

impl ParallelLocalEvaluator {
    pub fn new(ctx: Arc<EvalContext>) -> Self {
        Self { ctx }
    }
}

impl Evaluator for ParallelLocalEvaluator {
    fn evaluate(&mut self, _generation: u32, genomes: &[Genome]) -> Result<Vec<Evaluation>, EvaluatorError> {
        Ok(genomes.par_iter().map(|g| eval::evaluate_genome(&self.ctx, g)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    pub fitness: Fitness,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Mutate,
    Crossover,
    AddUnit,
    RemoveUnit,
    QuickProp,
}

impl Operator {
    pub const ALL: [Operator; 5] = [
        Operator::Mutate,
        Operator::Crossover,
        Operator::AddUnit,
        Operator::RemoveUnit,
        Operator::QuickProp,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    /// 0 is the initial population.
    pub generation: u32,
    pub best_fitness: Fitness,
    pub mean_validation_error: f64,
    pub evaluations_dispatched: usize,
    pub replaced: usize,
    pub diverged: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub master_seed: u64,
    pub generations: Vec<GenerationStats>,
    pub best_genome: Option<Genome>,
    pub best_fitness: Option<Fitness>,
    pub test_error_pct: Option<f64>,
    pub total_evaluations: usize,
    pub total_wall_ms: f64,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn best_fitness_trajectory(&self) -> Vec<Fitness> {
        self.generations.iter().map(|g| g.best_fitness).collect()
    }
}

/// Population sorted best-first, plus run bookkeeping.
#[derive(Clone, Debug)]
pub struct EaState {
    pub generation: u32,
    pub population: Vec<Individual>,
    pub evaluations: usize,
}

impl EaState {
    pub fn best(&self) -> &Individual {
        &self.population[0]
    }

    pub fn mean_validation_error(&self) -> f64 {
        self.population
            .iter()
            .map(|i| i.fitness.validation_error_pct)
            .sum::<f64>()
            / self.population.len() as f64
    }

    fn sort(&mut self) {
        self.population
            .sort_by(|a, b| fitness_compare(&a.fitness, &b.fitness));
    }
}

/// Index of the winner between `i` and `j`; ties favour `i`.
pub fn binary_tournament(population: &[Individual], i: usize, j: usize) -> usize {
    match fitness_compare(&population[j].fitness, &population[i].fitness) {
        Ordering::Less => j,
        _ => i,
    }
}

fn select(population: &[Individual], rng: &mut impl Rng) -> usize {
    let i = rng.random_range(0..population.len());
    let j = rng.random_range(0..population.len());
    binary_tournament(population, i, j)
}

/// Produces one offspring with a single, uniformly chosen operator.
pub fn make_offspring(
    state: &EaState,
    cfg: &EaConfig,
    ctx: &EvalContext,
    rng: &mut ChaCha8Rng,
) -> (Operator, Genome) {
    let pop = &state.population;
    let op = Operator::ALL[rng.random_range(0..Operator::ALL.len())];
    let bounds = cfg.hidden_bounds;
    let parent = &pop[select(pop, rng)].genome;
    let child = match op {
        Operator::Mutate => genome::mutate(parent, &cfg.operator_config, rng),
        Operator::Crossover => {
            let other = &pop[select(pop, rng)].genome;
            genome::crossover(parent, other, bounds, rng).expect("population shares problem dims")
        }
        Operator::AddUnit => genome::add_hidden_unit(parent, bounds, rng).genome,
        Operator::RemoveUnit => genome::remove_hidden_unit(parent, bounds, rng).genome,
        Operator::QuickProp => {
            let template = ctx.descriptor.qp.with_epsilon(parent.learning_rate);
            let out = genome::qp_operator(parent, &ctx.train, &template, cfg.operator_config.qp_operator_epochs, rng)
                .expect("population genomes are valid networks");
            debug_assert!(matches!(out.status, OperatorStatus::Applied | OperatorStatus::Diverged));
            out.genome
        }
    };
    (op, child.born(state.generation + 1))
}

/// Replaces the worst individuals by the offspring, pairing the best
/// offspring with the worst individual, and only where the offspring is not
/// worse. Returns the number replaced.
pub fn replace_worst(state: &mut EaState, mut offspring: Vec<Individual>) -> usize {
    offspring.sort_by(|a, b| fitness_compare(&a.fitness, &b.fitness));
    let n = state.population.len();
    let mut replaced = 0;
    for (k, child) in offspring.into_iter().enumerate().take(n - 1) {
        let slot = n - 1 - k;
        if fitness_compare(&child.fitness, &state.population[slot].fitness) != Ordering::Greater {
            state.population[slot] = child;
            replaced += 1;
        }
    }
    state.sort();
    replaced
}

/// Evaluates a fresh random population.
pub fn initial_state(
    cfg: &EaConfig,
    ctx: &EvalContext,
    evaluator: &mut dyn Evaluator,
    rng: &mut ChaCha8Rng,
) -> Result<EaState, EvaluatorError> {
    let genomes: Vec<Genome> = (0..cfg.population_size)
        .map(|_| genome::random_genome(rng, ctx.descriptor.problem_dims, cfg.hidden_bounds).expect("bounds validated"))
        .collect();
    let evals = evaluator.evaluate(0, &genomes)?;
    check_batch(&genomes, &evals)?;
    let mut state = EaState {
        generation: 0,
        population: genomes
            .into_iter()
            .zip(evals)
            .map(|(genome, e)| Individual {
                genome,
                fitness: e.fitness,
            })
            .collect(),
        evaluations: cfg.population_size,
    };
    state.sort();
    Ok(state)
}

fn check_batch(genomes: &[Genome], evals: &[Evaluation]) -> Result<(), EvaluatorError> {
    if genomes.len() != evals.len() {
        return Err(EvaluatorError(format!(
            "asked for {} evaluations, got {}",
            genomes.len(),
            evals.len()
        )));
    }
    Ok(())
}

/// One generation: breed, evaluate behind the barrier, replace.
pub fn run_generation(
    state: &mut EaState,
    cfg: &EaConfig,
    ctx: &EvalContext,
    evaluator: &mut dyn Evaluator,
    rng: &mut ChaCha8Rng,
) -> Result<GenerationStats, EvaluatorError> {
    let started = Instant::now();
    let r = cfg.offspring_per_generation();
    let genomes: Vec<Genome> = (0..r).map(|_| make_offspring(state, cfg, ctx, rng).1).collect();
    let evals = evaluator.evaluate(state.generation + 1, &genomes)?;
    check_batch(&genomes, &evals)?;
    let diverged = evals.iter().filter(|e| e.diverged).count();
    let offspring = genomes
        .into_iter()
        .zip(evals)
        .map(|(genome, e)| Individual {
            genome,
            fitness: e.fitness,
        })
        .collect();
    let replaced = replace_worst(state, offspring);
    state.generation += 1;
    state.evaluations += r;
    Ok(GenerationStats {
        generation: state.generation,
        best_fitness: state.best().fitness,
        mean_validation_error: state.mean_validation_error(),
        evaluations_dispatched: r,
        replaced,
        diverged,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs the full algorithm and scores the best genome on the test split.
/// An evaluator failure ends the run early with `complete == false`.
pub fn run_ea(cfg: &EaConfig, ctx: &EvalContext, evaluator: &mut dyn Evaluator) -> Result<RunRecord, EaError> {
    cfg.validate()?;
    if ctx.descriptor.bounds != cfg.hidden_bounds || ctx.descriptor.qp.max_epochs != cfg.epochs_fitness {
        return Err(EaError::Config(
            "job descriptor bounds and epochs must match the EA config".into(),
        ));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let mut record = RunRecord {
        master_seed: cfg.master_seed,
        generations: Vec::with_capacity(cfg.generations as usize + 1),
        best_genome: None,
        best_fitness: None,
        test_error_pct: None,
        total_evaluations: 0,
        total_wall_ms: 0.0,
        complete: false,
        error: None,
    };

    let outcome = (|| -> Result<EaState, EvaluatorError> {
        let gen_started = Instant::now();
        let mut state = initial_state(cfg, ctx, evaluator, &mut rng)?;
        record.total_evaluations = state.evaluations;
        record.generations.push(GenerationStats {
            generation: 0,
            best_fitness: state.best().fitness,
            mean_validation_error: state.mean_validation_error(),
            evaluations_dispatched: cfg.population_size,
            replaced: 0,
            diverged: 0,
            wall_ms: gen_started.elapsed().as_secs_f64() * 1e3,
        });
        tracing::info!(best = ?state.best().fitness, "initial population evaluated");
        for _ in 0..cfg.generations {
            let stats = run_generation(&mut state, cfg, ctx, evaluator, &mut rng)?;
            tracing::info!(
                generation = stats.generation,
                best = stats.best_fitness.validation_error_pct,
                hidden = stats.best_fitness.hidden_count,
                mean = stats.mean_validation_error,
                "generation done"
            );
            record.total_evaluations = state.evaluations;
            record.best_genome = Some(state.best().genome.clone());
            record.best_fitness = Some(state.best().fitness);
            record.generations.push(stats);
        }
        Ok(state)
    })();

    let finished = evaluator.finish();
    match outcome {
        Ok(state) => {
            let best = state.best();
            record.best_genome = Some(best.genome.clone());
            record.best_fitness = Some(best.fitness);
            record.test_error_pct = Some(eval::test_error(ctx, &best.genome).fitness.validation_error_pct);
            record.complete = finished.is_ok();
            if let Err(e) = finished {
                record.error = Some(e.to_string());
            }
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record.total_wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::GenomeId;
    use crate::protocol::JobDescriptor;

    fn small_ctx(epochs: usize) -> EvalContext {
        let mut d = JobDescriptor::glass(5);
        d.qp.max_epochs = epochs;
        EvalContext::build(&d, None).unwrap()
    }

    fn tiny_cfg() -> EaConfig {
        EaConfig {
            generations: 1,
            population_size: 4,
            epochs_fitness: 5,
            operator_config: OperatorConfig {
                qp_operator_epochs: 3,
                ..Default::default()
            },
            ..EaConfig::default()
        }
    }

    struct Counting<E> {
        inner: E,
        calls: Vec<usize>,
    }

    impl<E: Evaluator> Evaluator for Counting<E> {
        fn evaluate(&mut self, generation: u32, genomes: &[Genome]) -> Result<Vec<Evaluation>, EvaluatorError> {
            self.calls.push(genomes.len());
            self.inner.evaluate(generation, genomes)
        }
    }

    #[test]
    fn offspring_count_follows_fraction() {
        assert_eq!(EaConfig::default().offspring_per_generation(), 30);
        assert_eq!(tiny_cfg().offspring_per_generation(), 1);
        assert_eq!(EaConfig::desk_scale().offspring_per_generation(), 9);
        assert_eq!(EaConfig::default().total_evaluations(), 100 + 100 * 30);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut EaConfig)| {
            let mut c = EaConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.replacement_fraction = 0.0));
        assert!(bad(|c| c.replacement_fraction = 1.0));
        assert!(bad(|c| c.population_size = 1));
        assert!(bad(|c| c.generations = 0));
        assert!(EaConfig::default().validate().is_ok());
    }

    #[test]
    fn one_generation_dispatches_five_evaluations() {
        let cfg = tiny_cfg();
        let ctx = Arc::new(small_ctx(cfg.epochs_fitness));
        let mut ev = Counting {
            inner: LocalEvaluator::new(ctx.clone()),
            calls: vec![],
        };
        let record = run_ea(&cfg, &ctx, &mut ev).unwrap();
        assert!(record.complete);
        assert_eq!(ev.calls, vec![4, 1]);
        assert_eq!(record.total_evaluations, 5);
        assert_eq!(record.generations.len(), 2);
        assert!(record.test_error_pct.is_some());
    }

    #[test]
    fn same_seed_same_record() {
        let cfg = EaConfig {
            generations: 3,
            population_size: 6,
            ..tiny_cfg()
        };
        let ctx = Arc::new(small_ctx(cfg.epochs_fitness));
        let a = run_ea(&cfg, &ctx, &mut LocalEvaluator::new(ctx.clone())).unwrap();
        let b = run_ea(&cfg, &ctx, &mut ParallelLocalEvaluator::new(ctx.clone())).unwrap();
        assert_eq!(a.best_genome, b.best_genome);
        assert_eq!(a.best_fitness_trajectory(), b.best_fitness_trajectory());
        assert_eq!(a.test_error_pct, b.test_error_pct);
    }

    #[test]
    fn mismatched_descriptor_rejected() {
        let cfg = tiny_cfg();
        let ctx = Arc::new(small_ctx(7));
        assert!(run_ea(&cfg, &ctx, &mut LocalEvaluator::new(ctx.clone())).is_err());
    }

    struct Failing;
    impl Evaluator for Failing {
        fn evaluate(&mut self, generation: u32, genomes: &[Genome]) -> Result<Vec<Evaluation>, EvaluatorError> {
            if generation == 0 {
                Ok(genomes
                    .iter()
                    .map(|g| Evaluation {
                        fitness: Fitness::worst(g.hidden_count),
                        train_report: crate::mlp::TrainReport {
                            epochs_run: 0,
                            final_train_mse: 0.0,
                        },
                        diverged: false,
                    })
                    .collect())
            } else {
                Err(EvaluatorError("server gone".into()))
            }
        }
    }

    #[test]
    fn evaluator_failure_yields_incomplete_record() {
        let cfg = tiny_cfg();
        let ctx = small_ctx(cfg.epochs_fitness);
        let record = run_ea(&cfg, &ctx, &mut Failing).unwrap();
        assert!(!record.complete);
        assert_eq!(record.generations.len(), 1);
        assert!(record.error.unwrap().contains("server gone"));
        assert!(record.test_error_pct.is_none());
    }

    fn individual(err: f64, hidden: usize, id: u64) -> Individual {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        let mut g = genome::random_genome(
            &mut rng,
            crate::genome::ProblemDims { inputs: 2, outputs: 2 },
            HiddenBounds::new(hidden, hidden).unwrap(),
        )
        .unwrap();
        g.genome_id = GenomeId(id);
        Individual {
            genome: g,
            fitness: Fitness {
                validation_error_pct: err,
                hidden_count: hidden,
            },
        }
    }

    #[test]
    fn tournament_prefers_better() {
        let pop = vec![individual(10.0, 2, 0), individual(50.0, 2, 1), individual(10.0, 2, 2)];
        assert_eq!(binary_tournament(&pop, 0, 1), 0);
        assert_eq!(binary_tournament(&pop, 1, 0), 0);
        assert_eq!(binary_tournament(&pop, 2, 0), 2);
    }

    #[test]
    fn worse_offspring_leave_population_unchanged() {
        let mut state = EaState {
            generation: 0,
            population: vec![individual(10.0, 2, 0), individual(20.0, 2, 1), individual(30.0, 2, 2)],
            evaluations: 3,
        };
        let before = state.population.clone();
        let replaced = replace_worst(&mut state, vec![individual(40.0, 2, 9), individual(90.0, 2, 8)]);
        assert_eq!(replaced, 0);
        assert_eq!(state.population, before);
    }

    #[test]
    fn best_offspring_replaces_worst() {
        let mut state = EaState {
            generation: 0,
            population: vec![individual(10.0, 2, 0), individual(20.0, 2, 1), individual(30.0, 2, 2)],
            evaluations: 3,
        };
        let replaced = replace_worst(&mut state, vec![individual(25.0, 2, 9), individual(5.0, 2, 8)]);
        // 5 replaces 30, 25 does not beat 20
        assert_eq!(replaced, 1);
        let errs: Vec<f64> = state.population.iter().map(|i| i.fitness.validation_error_pct).collect();
        assert_eq!(errs, vec![5.0, 10.0, 20.0]);
    }
}
