//! The evolvable individual and its variation operators.
//!
//! A genome is an MLP specification: its hidden-layer size, a full set of
//! initial weights and the learning rate used when training it. A hidden
//! unit is the pair (incoming `w_ih` row, outgoing `w_ho` column); crossover
//! and the add/remove operators work at that granularity.

use std::cmp::Ordering;
use std::fmt;

use rand::seq::index;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::matrix::Matrix;
use crate::mlp::{self, MlpError, MlpNetwork, QpConfig};

pub const MIN_LEARNING_RATE: f64 = 1e-4;
pub const MAX_LEARNING_RATE: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenomeError {
    #[error("invalid hidden bounds [{min}, {max}]")]
    Bounds { min: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid genome: {0}")]
    Invalid(String),
    #[error("invalid operator config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub inputs: usize,
    pub outputs: usize,
}

impl ProblemDims {
    pub const GLASS: ProblemDims = ProblemDims { inputs: 9, outputs: 6 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for HiddenBounds {
    fn default() -> Self {
        Self { min: 2, max: 90 }
    }
}

impl HiddenBounds {
    pub fn new(min: usize, max: usize) -> Result<Self, GenomeError> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GenomeError> {
        if self.min == 0 || self.min > self.max {
            return Err(GenomeError::Bounds {
                min: self.min,
                max: self.max,
            });
        }
        Ok(())
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.min..=self.max).contains(&n)
    }
}

/// Genome identifier. Travels as a 16-digit hex string so that clients in
/// languages without 64-bit integers keep it intact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GenomeId(pub u64);

impl GenomeId {
    pub fn random(rng: &mut impl RngCore) -> Self {
        GenomeId(rng.next_u64())
    }
}

impl fmt::Display for GenomeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for GenomeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GenomeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(GenomeId)
            .map_err(|_| serde::de::Error::custom(format!("invalid genome id {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub genome_id: GenomeId,
    pub hidden_count: usize,
    pub w_ih: Matrix,
    pub w_ho: Matrix,
    pub learning_rate: f64,
    pub generation_born: u32,
}

impl Genome {
    pub fn from_network(net: &MlpNetwork, learning_rate: f64, genome_id: GenomeId) -> Self {
        Self {
            genome_id,
            hidden_count: net.n_hidden(),
            w_ih: net.w_ih().clone(),
            w_ho: net.w_ho().clone(),
            learning_rate,
            generation_born: 0,
        }
    }

    pub fn network(&self) -> Result<MlpNetwork, MlpError> {
        MlpNetwork::from_weights(self.w_ih.clone(), self.w_ho.clone())
    }

    pub fn born(mut self, generation: u32) -> Self {
        self.generation_born = generation;
        self
    }

    pub fn dims(&self) -> ProblemDims {
        ProblemDims {
            inputs: self.w_ih.cols().saturating_sub(1),
            outputs: self.w_ho.rows(),
        }
    }

    /// Checks shapes, weight finiteness, the learning-rate range and, when
    /// given, the hidden-unit bounds.
    pub fn validate(&self, dims: ProblemDims, bounds: Option<HiddenBounds>) -> Result<(), GenomeError> {
        if self.hidden_count == 0 {
            return Err(GenomeError::Invalid("hidden_count must be at least 1".into()));
        }
        if let Some(b) = bounds {
            if !b.contains(self.hidden_count) {
                return Err(GenomeError::Invalid(format!(
                    "hidden_count {} outside [{}, {}]",
                    self.hidden_count, b.min, b.max
                )));
            }
        }
        if self.w_ih.shape() != (self.hidden_count, dims.inputs + 1) {
            return Err(GenomeError::Dimension(format!(
                "w_ih is {:?}, expected {:?}",
                self.w_ih.shape(),
                (self.hidden_count, dims.inputs + 1)
            )));
        }
        if self.w_ho.shape() != (dims.outputs, self.hidden_count + 1) {
            return Err(GenomeError::Dimension(format!(
                "w_ho is {:?}, expected {:?}",
                self.w_ho.shape(),
                (dims.outputs, self.hidden_count + 1)
            )));
        }
        if !self.w_ih.is_finite() || !self.w_ho.is_finite() {
            return Err(GenomeError::Invalid("non-finite weight".into()));
        }
        if !(MIN_LEARNING_RATE..=MAX_LEARNING_RATE).contains(&self.learning_rate) {
            return Err(GenomeError::Invalid(format!(
                "learning_rate {} outside [{MIN_LEARNING_RATE}, {MAX_LEARNING_RATE}]",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Incoming weights (with bias) and outgoing weights of hidden unit `j`.
    pub fn unit(&self, j: usize) -> (Vec<f64>, Vec<f64>) {
        (self.w_ih.row(j).to_vec(), self.w_ho.column(j))
    }

    pub fn output_biases(&self) -> Vec<f64> {
        self.w_ho.column(self.hidden_count)
    }
}

/// Rebuilds a genome from a list of hidden units and the output biases.
fn assemble(units: &[(Vec<f64>, Vec<f64>)], output_bias: &[f64], learning_rate: f64, id: GenomeId) -> Genome {
    let hidden = units.len();
    let n_out = output_bias.len();
    let w_ih = Matrix::from_rows(units.iter().map(|(inc, _)| inc.clone()).collect())
        .expect("units share the input width");
    let w_ho = Matrix::from_fn(n_out, hidden + 1, |k, j| {
        if j == hidden {
            output_bias[k]
        } else {
            units[j].1[k]
        }
    });
    Genome {
        genome_id: id,
        hidden_count: hidden,
        w_ih,
        w_ho,
        learning_rate,
        generation_born: 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    pub weight_mutation_sigma: f64,
    pub weight_mutation_prob: f64,
    pub lr_mutation_sigma: f64,
    pub qp_operator_epochs: usize,
    /// Application rate shared by every operator.
    pub operator_rate: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            weight_mutation_sigma: 0.1,
            weight_mutation_prob: 0.1,
            lr_mutation_sigma: 0.2,
            qp_operator_epochs: 50,
            operator_rate: 0.2,
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<(), GenomeError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(GenomeError::Config(format!("{name} {p} outside [0, 1]")))
            }
        };
        prob("weight_mutation_prob", self.weight_mutation_prob)?;
        prob("operator_rate", self.operator_rate)?;
        if !(self.weight_mutation_sigma > 0.0 && self.weight_mutation_sigma.is_finite()) {
            return Err(GenomeError::Config("weight_mutation_sigma must be > 0".into()));
        }
        if !(self.lr_mutation_sigma >= 0.0 && self.lr_mutation_sigma.is_finite()) {
            return Err(GenomeError::Config("lr_mutation_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorStatus {
    Applied,
    /// A bound made the operator a no-op; the genome is returned unchanged.
    NoOp,
    /// Training diverged; the parent is returned unchanged.
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorOutcome {
    pub genome: Genome,
    pub status: OperatorStatus,
}

/// Uniform hidden count, weights in [-0.5, 0.5], log-uniform learning rate in [1e-3, 1].
pub fn random_genome(rng: &mut impl Rng, dims: ProblemDims, bounds: HiddenBounds) -> Result<Genome, GenomeError> {
    bounds.validate()?;
    let hidden = rng.random_range(bounds.min..=bounds.max);
    let w_ih = Matrix::from_fn(hidden, dims.inputs + 1, |_, _| rng.random_range(-0.5..=0.5));
    let w_ho = Matrix::from_fn(dims.outputs, hidden + 1, |_, _| rng.random_range(-0.5..=0.5));
    let learning_rate = 10f64.powf(rng.random_range(-3.0..=0.0));
    let genome_id = GenomeId::random(rng);
    Ok(Genome {
        genome_id,
        hidden_count: hidden,
        w_ih,
        w_ho,
        learning_rate,
        generation_born: 0,
    })
}

/// Gaussian weight perturbation plus log-normal learning-rate drift.
pub fn mutate(g: &Genome, cfg: &OperatorConfig, rng: &mut impl Rng) -> Genome {
    let noise = Normal::new(0.0, cfg.weight_mutation_sigma).expect("sigma validated");
    let mut child = g.clone();
    for w in child
        .w_ih
        .as_mut_slice()
        .iter_mut()
        .chain(child.w_ho.as_mut_slice().iter_mut())
    {
        if rng.random::<f64>() < cfg.weight_mutation_prob {
            *w += noise.sample(rng);
        }
    }
    let lr_noise = Normal::new(0.0, cfg.lr_mutation_sigma).expect("sigma validated");
    child.learning_rate = (g.learning_rate * lr_noise.sample(rng).exp()).clamp(MIN_LEARNING_RATE, MAX_LEARNING_RATE);
    child.genome_id = GenomeId::random(rng);
    child
}

fn nonempty_subset(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    loop {
        let picked: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
        if !picked.is_empty() {
            return picked;
        }
    }
}

/// Unit-level crossover: the child takes a uniformly chosen non-empty subset
/// of each parent's hidden units.
pub fn crossover(a: &Genome, b: &Genome, bounds: HiddenBounds, rng: &mut impl Rng) -> Result<Genome, GenomeError> {
    check_same_dims(a, b)?;
    let from_a = nonempty_subset(a.hidden_count, rng);
    let from_b = nonempty_subset(b.hidden_count, rng);
    crossover_units(a, b, &from_a, &from_b, bounds, rng)
}

fn check_same_dims(a: &Genome, b: &Genome) -> Result<(), GenomeError> {
    if a.dims() != b.dims() {
        return Err(GenomeError::Dimension(format!(
            "parents have dims {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Crossover with explicit unit choices. Units of `a` come first, then those
/// of `b`. If the child is larger than `bounds.max`, random units are
/// dropped; if smaller than `bounds.min`, random unchosen parent units are
/// added. Output biases are the parents' mean; the learning rate is `a`'s.
pub fn crossover_units(
    a: &Genome,
    b: &Genome,
    from_a: &[usize],
    from_b: &[usize],
    bounds: HiddenBounds,
    rng: &mut impl Rng,
) -> Result<Genome, GenomeError> {
    check_same_dims(a, b)?;
    bounds.validate()?;
    let mut units: Vec<(Vec<f64>, Vec<f64>)> = from_a
        .iter()
        .map(|&j| a.unit(j))
        .chain(from_b.iter().map(|&j| b.unit(j)))
        .collect();

    if units.len() > bounds.max {
        let keep = index::sample(rng, units.len(), bounds.max).into_vec();
        let mut keep_sorted = keep;
        keep_sorted.sort_unstable();
        units = keep_sorted.into_iter().map(|i| units[i].clone()).collect();
    } else if units.len() < bounds.min {
        let mut spare: Vec<(Vec<f64>, Vec<f64>)> = (0..a.hidden_count)
            .filter(|j| !from_a.contains(j))
            .map(|j| a.unit(j))
            .chain((0..b.hidden_count).filter(|j| !from_b.contains(j)).map(|j| b.unit(j)))
            .collect();
        while units.len() < bounds.min && !spare.is_empty() {
            let i = rng.random_range(0..spare.len());
            units.push(spare.swap_remove(i));
        }
    }
    if units.is_empty() {
        return Err(GenomeError::Invalid("crossover produced no hidden units".into()));
    }

    let bias: Vec<f64> = a
        .output_biases()
        .iter()
        .zip(b.output_biases())
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    Ok(assemble(&units, &bias, a.learning_rate, GenomeId::random(rng)))
}

/// Appends one hidden unit with weights uniform in [-0.1, 0.1].
pub fn add_hidden_unit(g: &Genome, bounds: HiddenBounds, rng: &mut impl Rng) -> OperatorOutcome {
    if g.hidden_count >= bounds.max {
        return OperatorOutcome {
            genome: g.clone(),
            status: OperatorStatus::NoOp,
        };
    }
    let dims = g.dims();
    let mut units: Vec<_> = (0..g.hidden_count).map(|j| g.unit(j)).collect();
    let incoming: Vec<f64> = (0..=dims.inputs).map(|_| rng.random_range(-0.1..=0.1)).collect();
    let outgoing: Vec<f64> = (0..dims.outputs).map(|_| rng.random_range(-0.1..=0.1)).collect();
    units.push((incoming, outgoing));
    OperatorOutcome {
        genome: assemble(&units, &g.output_biases(), g.learning_rate, GenomeId::random(rng)),
        status: OperatorStatus::Applied,
    }
}

/// Deletes one uniformly chosen hidden unit.
pub fn remove_hidden_unit(g: &Genome, bounds: HiddenBounds, rng: &mut impl Rng) -> OperatorOutcome {
    if g.hidden_count <= bounds.min || g.hidden_count <= 1 {
        return OperatorOutcome {
            genome: g.clone(),
            status: OperatorStatus::NoOp,
        };
    }
    let j = rng.random_range(0..g.hidden_count);
    let mut child = remove_unit_at(g, j);
    child.genome_id = GenomeId::random(rng);
    OperatorOutcome {
        genome: child,
        status: OperatorStatus::Applied,
    }
}

/// Removes hidden unit `j`, keeping every other weight bit-for-bit.
pub fn remove_unit_at(g: &Genome, j: usize) -> Genome {
    let keep: Vec<usize> = (0..g.hidden_count).filter(|&i| i != j).collect();
    let mut cols = keep.clone();
    cols.push(g.hidden_count);
    Genome {
        hidden_count: keep.len(),
        w_ih: g.w_ih.select_rows(&keep),
        w_ho: g.w_ho.select_columns(&cols),
        ..g.clone()
    }
}

/// Lamarckian QuickProp operator: trains the genome's network for `epochs`
/// epochs with its own learning rate and writes the weights back.
/// `template` supplies mu and weight decay.
pub fn qp_operator(
    g: &Genome,
    train: &[Sample],
    template: &QpConfig,
    epochs: usize,
    rng: &mut impl RngCore,
) -> Result<OperatorOutcome, MlpError> {
    let cfg = QpConfig {
        epsilon: g.learning_rate,
        ..*template
    };
    let net = g.network()?;
    match mlp::train_epochs(&net, train, &cfg, epochs) {
        Ok((trained, _)) => {
            let mut child = g.clone();
            let (w_ih, w_ho) = trained.into_weights();
            child.w_ih = w_ih;
            child.w_ho = w_ho;
            child.genome_id = GenomeId::random(rng);
            Ok(OperatorOutcome {
                genome: child,
                status: OperatorStatus::Applied,
            })
        }
        Err(MlpError::Diverged { .. }) => Ok(OperatorOutcome {
            genome: g.clone(),
            status: OperatorStatus::Diverged,
        }),
        Err(e) => Err(e),
    }
}

/// Validation error of a trained network, with hidden-unit count as tiebreak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    pub validation_error_pct: f64,
    pub hidden_count: usize,
}

impl Fitness {
    pub fn worst(hidden_count: usize) -> Self {
        Self {
            validation_error_pct: 100.0,
            hidden_count,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if (0.0..=100.0).contains(&self.validation_error_pct) {
            Ok(())
        } else {
            Err(format!(
                "validation_error_pct {} outside [0, 100]",
                self.validation_error_pct
            ))
        }
    }
}

/// `Less` means `a` is the better individual: lower error, then fewer hidden units.
pub fn fitness_compare(a: &Fitness, b: &Fitness) -> Ordering {
    a.validation_error_pct
        .total_cmp(&b.validation_error_pct)
        .then(a.hidden_count.cmp(&b.hidden_count))
}
