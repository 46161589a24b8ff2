//! Dense single-hidden-layer perceptron with sigmoid units, sum-of-squares
//! loss over one-hot targets, and full-batch QuickProp training.
//!
//! Weight layout: `w_ih` is `n_hidden x (n_inputs + 1)` and `w_ho` is
//! `n_outputs x (n_hidden + 1)`. The last column of each matrix is the bias.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty sample list")]
    EmptySamples,
    #[error("label {label} out of range for {n_outputs} outputs")]
    Label { label: usize, n_outputs: usize },
    #[error("non-finite weight")]
    NonFinite,
    #[error("invalid QuickProp config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Mean squared error of the last finite network state.
        last_mse: f64,
    },
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    n_inputs: usize,
    n_hidden: usize,
    n_outputs: usize,
    w_ih: Matrix,
    w_ho: Matrix,
}

/// Gradient of the batch loss, shaped like the network's weight matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub w_ih: Matrix,
    pub w_ho: Matrix,
}

impl Gradient {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self {
            w_ih: Matrix::zeros(net.w_ih.rows(), net.w_ih.cols()),
            w_ho: Matrix::zeros(net.w_ho.rows(), net.w_ho.cols()),
        }
    }

    /// Iterates every component, input-to-hidden weights first.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_ih
            .as_slice()
            .iter()
            .chain(self.w_ho.as_slice())
            .copied()
    }
}

impl MlpNetwork {
    /// Builds a network from weight matrices, deriving the layer sizes.
    pub fn from_weights(w_ih: Matrix, w_ho: Matrix) -> Result<Self, MlpError> {
        let n_hidden = w_ih.rows();
        if n_hidden == 0 {
            return Err(MlpError::Dimension("network needs at least one hidden unit".into()));
        }
        if w_ih.cols() == 0 {
            return Err(MlpError::Dimension("input weight matrix has no bias column".into()));
        }
        if w_ho.cols() != n_hidden + 1 {
            return Err(MlpError::Dimension(format!(
                "output weights have {} columns, expected {}",
                w_ho.cols(),
                n_hidden + 1
            )));
        }
        if w_ho.rows() == 0 {
            return Err(MlpError::Dimension("network needs at least one output".into()));
        }
        if !w_ih.is_finite() || !w_ho.is_finite() {
            return Err(MlpError::NonFinite);
        }
        Ok(Self {
            n_inputs: w_ih.cols() - 1,
            n_hidden,
            n_outputs: w_ho.rows(),
            w_ih,
            w_ho,
        })
    }

    pub fn zeros(n_inputs: usize, n_hidden: usize, n_outputs: usize) -> Self {
        Self::from_weights(
            Matrix::zeros(n_hidden, n_inputs + 1),
            Matrix::zeros(n_outputs, n_hidden + 1),
        )
        .expect("zero network has consistent shapes")
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn w_ih(&self) -> &Matrix {
        &self.w_ih
    }

    pub fn w_ho(&self) -> &Matrix {
        &self.w_ho
    }

    pub fn into_weights(self) -> (Matrix, Matrix) {
        (self.w_ih, self.w_ho)
    }

    /// Number of labels the network can predict. A single output unit is a
    /// binary classifier: label 1 is encoded as target 1.0, label 0 as 0.0.
    pub fn n_classes(&self) -> usize {
        self.n_outputs.max(2)
    }

    pub fn weight_count(&self) -> usize {
        self.w_ih.as_slice().len() + self.w_ho.as_slice().len()
    }

    fn check_features(&self, features: &[f64]) -> Result<(), MlpError> {
        if features.len() != self.n_inputs {
            return Err(MlpError::Dimension(format!(
                "expected {} features, got {}",
                self.n_inputs,
                features.len()
            )));
        }
        Ok(())
    }

    fn check_samples(&self, samples: &[Sample]) -> Result<(), MlpError> {
        if samples.is_empty() {
            return Err(MlpError::EmptySamples);
        }
        for s in samples {
            self.check_features(&s.features)?;
            if s.class_index >= self.n_classes() {
                return Err(MlpError::Label {
                    label: s.class_index,
                    n_outputs: self.n_outputs,
                });
            }
        }
        Ok(())
    }

    #[inline]
    fn hidden_into(&self, features: &[f64], hidden: &mut [f64]) {
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = self.w_ih.row(j);
            let mut acc = row[self.n_inputs];
            for (w, x) in row[..self.n_inputs].iter().zip(features) {
                acc += w * x;
            }
            *h = sigmoid(acc);
        }
    }

    #[inline]
    fn output_into(&self, hidden: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let row = self.w_ho.row(k);
            let mut acc = row[self.n_hidden];
            for (w, h) in row[..self.n_hidden].iter().zip(hidden) {
                acc += w * h;
            }
            *o = sigmoid(acc);
        }
    }

    pub fn hidden_activations(&self, features: &[f64]) -> Result<Vec<f64>, MlpError> {
        self.check_features(features)?;
        let mut hidden = vec![0.0; self.n_hidden];
        self.hidden_into(features, &mut hidden);
        Ok(hidden)
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, MlpError> {
        let hidden = self.hidden_activations(features)?;
        let mut out = vec![0.0; self.n_outputs];
        self.output_into(&hidden, &mut out);
        Ok(out)
    }

    /// Index of the largest output (ties go to the lowest index), or the
    /// thresholded label for a single-output network.
    pub fn predict(&self, features: &[f64]) -> Result<usize, MlpError> {
        Ok(self.decide(&self.forward(features)?))
    }

    fn decide(&self, out: &[f64]) -> usize {
        if self.n_outputs == 1 {
            usize::from(out[0] > 0.5)
        } else {
            argmax(out)
        }
    }

    #[inline]
    fn target(&self, k: usize, class_index: usize) -> f64 {
        let hot = if self.n_outputs == 1 { class_index == 1 } else { k == class_index };
        if hot {
            1.0
        } else {
            0.0
        }
    }

    /// Percentage of samples whose predicted label differs from the label.
    pub fn classification_error(&self, samples: &[Sample]) -> Result<f64, MlpError> {
        self.check_samples(samples)?;
        let mut hidden = vec![0.0; self.n_hidden];
        let mut out = vec![0.0; self.n_outputs];
        let mut wrong = 0usize;
        for s in samples {
            self.hidden_into(&s.features, &mut hidden);
            self.output_into(&hidden, &mut out);
            if self.decide(&out) != s.class_index {
                wrong += 1;
            }
        }
        Ok(100.0 * wrong as f64 / samples.len() as f64)
    }

    /// Mean of `(o - t)^2` over every sample and output unit.
    pub fn mse(&self, samples: &[Sample]) -> Result<f64, MlpError> {
        self.check_samples(samples)?;
        Ok(self.sse_unchecked(samples) * 2.0 / (samples.len() * self.n_outputs) as f64)
    }

    /// `0.5 * sum (o - t)^2`, the loss whose gradient `batch_gradient` returns.
    pub fn loss(&self, samples: &[Sample]) -> Result<f64, MlpError> {
        self.check_samples(samples)?;
        Ok(self.sse_unchecked(samples))
    }

    fn sse_unchecked(&self, samples: &[Sample]) -> f64 {
        let mut hidden = vec![0.0; self.n_hidden];
        let mut out = vec![0.0; self.n_outputs];
        let mut total = 0.0;
        for s in samples {
            self.hidden_into(&s.features, &mut hidden);
            self.output_into(&hidden, &mut out);
            for (k, o) in out.iter().enumerate() {
                let t = self.target(k, s.class_index);
                total += (o - t) * (o - t);
            }
        }
        0.5 * total
    }

    /// Exact gradient of `0.5 * sum_samples sum_outputs (o - t)^2`.
    pub fn batch_gradient(&self, samples: &[Sample]) -> Result<Gradient, MlpError> {
        self.check_samples(samples)?;
        let mut grad = Gradient::zeros_like(self);
        self.accumulate_gradient(samples, &mut grad);
        Ok(grad)
    }

    fn accumulate_gradient(&self, samples: &[Sample], grad: &mut Gradient) {
        let (n_in, n_hid) = (self.n_inputs, self.n_hidden);
        let mut hidden = vec![0.0; n_hid];
        let mut out = vec![0.0; self.n_outputs];
        let mut delta_out = vec![0.0; self.n_outputs];
        let mut delta_hid = vec![0.0; n_hid];
        for s in samples {
            self.hidden_into(&s.features, &mut hidden);
            self.output_into(&hidden, &mut out);
            for (k, (d, o)) in delta_out.iter_mut().zip(&out).enumerate() {
                let t = self.target(k, s.class_index);
                *d = (o - t) * o * (1.0 - o);
            }
            delta_hid.iter_mut().for_each(|d| *d = 0.0);
            for (k, d_o) in delta_out.iter().enumerate() {
                let w_row = self.w_ho.row(k);
                let g_row = grad.w_ho.row_mut(k);
                for j in 0..n_hid {
                    g_row[j] += d_o * hidden[j];
                    delta_hid[j] += d_o * w_row[j];
                }
                g_row[n_hid] += d_o;
            }
            for j in 0..n_hid {
                let d_h = delta_hid[j] * hidden[j] * (1.0 - hidden[j]);
                let g_row = grad.w_ih.row_mut(j);
                for (g, x) in g_row[..n_in].iter_mut().zip(&s.features) {
                    *g += d_h * x;
                }
                g_row[n_in] += d_h;
            }
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// QuickProp hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpConfig {
    /// Gradient step size; this is the evolved learning rate.
    pub epsilon: f64,
    /// Maximum growth factor of the secant step.
    pub mu: f64,
    pub max_epochs: usize,
    pub weight_decay: f64,
}

impl QpConfig {
    pub const DEFAULT_MU: f64 = 1.75;

    pub fn new(epsilon: f64, mu: f64, max_epochs: usize, weight_decay: f64) -> Result<Self, MlpError> {
        let cfg = Self {
            epsilon,
            mu,
            max_epochs,
            weight_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 10.0) {
            return Err(MlpError::Config(format!("epsilon {} outside (0, 10]", self.epsilon)));
        }
        if !(self.mu > 1.0 && self.mu <= 4.0) {
            return Err(MlpError::Config(format!("mu {} outside (1, 4]", self.mu)));
        }
        if self.max_epochs == 0 {
            return Err(MlpError::Config("max_epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MlpError::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_mse: f64,
}

/// The two parts of a QuickProp update for one weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpTerms {
    /// Secant (quadratic) step, clipped to `mu * |prev_delta|`.
    pub quadratic: f64,
    /// Plain gradient step `-epsilon * grad`, present on a cold start, a
    /// degenerate secant, or when the slope kept its sign.
    pub gradient: f64,
}

impl QpTerms {
    pub fn delta(&self) -> f64 {
        self.quadratic + self.gradient
    }
}

pub fn qp_terms(grad: f64, prev_grad: f64, prev_delta: f64, epsilon: f64, mu: f64) -> QpTerms {
    let gradient = -epsilon * grad;
    if prev_delta == 0.0 || prev_grad == grad {
        return QpTerms {
            quadratic: 0.0,
            gradient,
        };
    }
    let beta = grad / (prev_grad - grad);
    let limit = mu * prev_delta.abs();
    let quadratic = (beta * prev_delta).clamp(-limit, limit);
    let same_sign = (grad > 0.0 && prev_grad > 0.0) || (grad < 0.0 && prev_grad < 0.0);
    QpTerms {
        quadratic,
        gradient: if same_sign { gradient } else { 0.0 },
    }
}

/// Weight change for one weight given its current and previous slope.
pub fn qp_step(grad: f64, prev_grad: f64, prev_delta: f64, cfg: &QpConfig) -> f64 {
    qp_terms(grad, prev_grad, prev_delta, cfg.epsilon, cfg.mu).delta()
}

/// Runs exactly `cfg.max_epochs` full-batch QuickProp epochs.
pub fn train_qp(
    net: &MlpNetwork,
    samples: &[Sample],
    cfg: &QpConfig,
) -> Result<(MlpNetwork, TrainReport), MlpError> {
    cfg.validate()?;
    train_epochs(net, samples, cfg, cfg.max_epochs)
}

/// Like [`train_qp`] but with an explicit epoch count, which may be zero.
/// `cfg.max_epochs` is ignored.
pub fn train_epochs(
    net: &MlpNetwork,
    samples: &[Sample],
    cfg: &QpConfig,
    epochs: usize,
) -> Result<(MlpNetwork, TrainReport), MlpError> {
    net.check_samples(samples)?;
    let mut net = net.clone();
    let n_ih = net.w_ih.as_slice().len();
    let n = net.weight_count();
    let mut grad = Gradient::zeros_like(&net);
    let mut prev_grad = vec![0.0; n];
    let mut prev_delta = vec![0.0; n];
    let mut next = vec![0.0; n];

    for epoch in 1..=epochs {
        grad.w_ih.as_mut_slice().fill(0.0);
        grad.w_ho.as_mut_slice().fill(0.0);
        net.accumulate_gradient(samples, &mut grad);

        let weights = net.w_ih.as_slice().iter().chain(net.w_ho.as_slice());
        let mut finite = true;
        for (i, (w, g)) in weights.zip(grad.iter()).enumerate() {
            let g = g + cfg.weight_decay * w;
            let delta = qp_step(g, prev_grad[i], prev_delta[i], cfg);
            let updated = w + delta;
            finite &= updated.is_finite();
            next[i] = updated;
            prev_grad[i] = g;
            prev_delta[i] = delta;
        }
        if !finite {
            return Err(MlpError::Diverged {
                epoch,
                last_mse: net.mse(samples)?,
            });
        }
        net.w_ih.as_mut_slice().copy_from_slice(&next[..n_ih]);
        net.w_ho.as_mut_slice().copy_from_slice(&next[n_ih..]);
    }

    let final_train_mse = net.mse(samples)?;
    Ok((
        net,
        TrainReport {
            epochs_run: epochs,
            final_train_mse,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(features: &[f64], class_index: usize) -> Sample {
        Sample {
            features: features.to_vec(),
            class_index,
        }
    }

    fn random_net(rng: &mut impl Rng, n_in: usize, n_hid: usize, n_out: usize, scale: f64) -> MlpNetwork {
        MlpNetwork::from_weights(
            Matrix::from_fn(n_hid, n_in + 1, |_, _| rng.random_range(-scale..scale)),
            Matrix::from_fn(n_out, n_hid + 1, |_, _| rng.random_range(-scale..scale)),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_output_half() {
        let net = MlpNetwork::zeros(9, 4, 6);
        let out = net.forward(&[0.3, -1.0, 2.0, 0.0, 5.0, 1.0, 1.0, 1.0, 7.0]).unwrap();
        assert_eq!(out, vec![0.5; 6]);
    }

    #[test]
    fn hand_computed_nested_sigmoid() {
        // 1-1-1 net: w1 = 0.8, b1 = -0.3, w2 = 1.5, b2 = 0.25, x = 2.0
        let net = MlpNetwork::from_weights(
            Matrix::from_rows(vec![vec![0.8, -0.3]]).unwrap(),
            Matrix::from_rows(vec![vec![1.5, 0.25]]).unwrap(),
        )
        .unwrap();
        // h = sigma(0.8 * 2 - 0.3) = sigma(1.3) = 0.785834983042558612...
        // o = sigma(1.5 * h + 0.25)            = 0.806706862429930196...
        // (30-digit evaluation)
        let out = net.forward(&[2.0]).unwrap();
        assert!((net.hidden_activations(&[2.0]).unwrap()[0] - 0.785_834_983_042_558_6).abs() < 1e-15);
        assert!((out[0] - 0.806_706_862_429_930_2).abs() < 1e-15);
    }

    #[test]
    fn outgoing_weight_change_leaves_hidden_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_net(&mut rng, 3, 4, 2, 1.0);
        let x = [0.2, 0.7, -0.4];
        let (w_ih, mut w_ho) = net.clone().into_weights();
        for k in 0..w_ho.rows() {
            let v = w_ho.get(k, 1);
            w_ho.set(k, 1, 2.0 * v);
        }
        let doubled = MlpNetwork::from_weights(w_ih, w_ho).unwrap();
        assert_eq!(net.hidden_activations(&x).unwrap(), doubled.hidden_activations(&x).unwrap());
        assert_ne!(net.forward(&x).unwrap(), doubled.forward(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let net = MlpNetwork::zeros(3, 2, 2);
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(MlpError::Dimension(_))));
        assert!(matches!(
            MlpNetwork::from_weights(Matrix::zeros(2, 4), Matrix::zeros(2, 4)),
            Err(MlpError::Dimension(_))
        ));
        assert!(matches!(
            MlpNetwork::from_weights(Matrix::zeros(0, 4), Matrix::zeros(2, 1)),
            Err(MlpError::Dimension(_))
        ));
    }

    #[test]
    fn perfect_predictor_has_zero_error() {
        // Hidden unit j copies input j; output k reads hidden k with a large weight.
        let n = 3;
        let w_ih = Matrix::from_fn(n, n + 1, |r, c| if c == r { 20.0 } else if c == n { -10.0 } else { 0.0 });
        let w_ho = Matrix::from_fn(n, n + 1, |r, c| if c == r { 20.0 } else if c == n { -10.0 } else { 0.0 });
        let net = MlpNetwork::from_weights(w_ih, w_ho).unwrap();
        let samples: Vec<Sample> = (0..n)
            .map(|k| sample(&(0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<_>>(), k))
            .collect();
        assert_eq!(net.classification_error(&samples).unwrap(), 0.0);
    }

    #[test]
    fn zero_net_predicts_class_zero() {
        let net = MlpNetwork::zeros(1, 2, 3);
        let samples = vec![
            sample(&[0.1], 0),
            sample(&[0.2], 1),
            sample(&[0.3], 2),
            sample(&[0.4], 0),
            sample(&[0.5], 2),
        ];
        // class 0 frequency 2/5 -> error 60%
        assert_eq!(net.classification_error(&samples).unwrap(), 60.0);
    }

    #[test]
    fn one_of_four_misclassified() {
        let net = MlpNetwork::zeros(1, 1, 2);
        let samples = vec![sample(&[0.0], 0), sample(&[1.0], 0), sample(&[2.0], 0), sample(&[3.0], 1)];
        assert_eq!(net.classification_error(&samples).unwrap(), 25.0);
    }

    #[test]
    fn empty_or_bad_samples_rejected() {
        let net = MlpNetwork::zeros(1, 1, 2);
        assert_eq!(net.classification_error(&[]), Err(MlpError::EmptySamples));
        assert_eq!(net.batch_gradient(&[]), Err(MlpError::EmptySamples));
        assert!(matches!(
            net.classification_error(&[sample(&[0.0], 2)]),
            Err(MlpError::Label { label: 2, .. })
        ));
    }

    #[test]
    fn gradient_vanishes_at_zero_error() {
        // Output biases of +/-800 saturate the sigmoids to exactly 1.0 and 0.0,
        // so every output equals its one-hot target.
        let w_ho = Matrix::from_rows(vec![vec![0.0, 0.0, 800.0], vec![0.0, 0.0, -800.0]]).unwrap();
        let net = MlpNetwork::from_weights(Matrix::zeros(2, 2), w_ho).unwrap();
        let samples = vec![sample(&[0.3], 0), sample(&[-1.0], 0)];
        assert_eq!(net.loss(&samples).unwrap(), 0.0);
        let grad = net.batch_gradient(&samples).unwrap();
        assert!(grad.iter().all(|g| g == 0.0));

        // A stationary point that is not a minimum: identical features, both labels.
        let net = MlpNetwork::zeros(1, 2, 2);
        let samples = vec![sample(&[0.0], 0), sample(&[0.0], 1)];
        assert!(net.batch_gradient(&samples).unwrap().iter().all(|g| g == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_net(&mut rng, 3, 4, 3, 1.0);
        let samples: Vec<Sample> = (0..5)
            .map(|i| sample(&[rng.random(), rng.random(), rng.random()], i % 3))
            .collect();
        let batch = net.batch_gradient(&samples).unwrap();
        let mut summed = vec![0.0; net.weight_count()];
        for s in &samples {
            let g = net.batch_gradient(std::slice::from_ref(s)).unwrap();
            for (acc, v) in summed.iter_mut().zip(g.iter()) {
                *acc += v;
            }
        }
        for (a, b) in batch.iter().zip(&summed) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn qp_config_bounds() {
        assert!(QpConfig::new(0.5, 1.75, 1, 0.0).is_ok());
        assert!(QpConfig::new(0.0, 1.75, 1, 0.0).is_err());
        assert!(QpConfig::new(10.5, 1.75, 1, 0.0).is_err());
        assert!(QpConfig::new(0.5, 1.0, 1, 0.0).is_err());
        assert!(QpConfig::new(0.5, 4.5, 1, 0.0).is_err());
        assert!(QpConfig::new(0.5, 1.75, 0, 0.0).is_err());
        assert!(QpConfig::new(0.5, 1.75, 1, -0.1).is_err());
    }

    #[test]
    fn qp_step_zero_gradient() {
        let cfg = QpConfig::new(0.5, 1.75, 1, 0.0).unwrap();
        assert_eq!(qp_step(0.0, 0.0, 0.0, &cfg), 0.0);
        assert_eq!(qp_step(0.0, 0.7, 0.0, &cfg), 0.0);
        // beta = 0 and the slopes differ in sign (0 has none) -> no step
        assert_eq!(qp_step(0.0, 0.7, -0.3, &cfg), 0.0);
        assert_eq!(qp_step(0.0, -0.7, 0.3, &cfg), 0.0);
    }

    #[test]
    fn qp_step_cold_start_and_flat_secant() {
        let cfg = QpConfig::new(0.25, 1.75, 1, 0.0).unwrap();
        assert_eq!(qp_step(2.0, 9.0, 0.0, &cfg), -0.5);
        assert_eq!(qp_step(2.0, 2.0, 0.3, &cfg), -0.5);
    }

    #[test]
    fn qp_step_clips_overshoot() {
        // prev_grad = 1, grad = 2: beta = 2 / (1 - 2) = -2, secant step -0.2
        // against a cap of 1.75 * 0.1 = 0.175.
        let terms = qp_terms(2.0, 1.0, 0.1, 0.5, 1.75);
        assert_eq!(terms.quadratic, -(1.75 * 0.1));
        assert_eq!(terms.gradient, -1.0);
        // Opposite slopes: no gradient term, only the (unclipped) secant.
        let terms = qp_terms(-1.0, 1.0, 0.1, 0.5, 1.75);
        assert_eq!(terms.quadratic, -0.05);
        assert_eq!(terms.gradient, 0.0);
    }

    /// Hand-stepped QuickProp on E = w^2 / 2 (grad = w), w0 = 1, epsilon = 0.5, mu = 1.75.
    ///
    /// epoch 1: cold start, delta = -0.5 * 1 = -0.5                      -> w = 0.5
    /// epoch 2: beta = 0.5 / (1 - 0.5) = 1, secant = -0.5 (cap 0.875),
    ///          same sign so add -0.5 * 0.5 = -0.25, delta = -0.75         -> w = -0.25
    /// epoch 3: beta = -0.25 / (0.5 + 0.25) = -1/3, secant = 0.25,
    ///          signs differ, delta = 0.25                                -> w = 0
    /// epoch 4: grad = 0, beta = 0, delta = 0                             -> w = 0
    #[test]
    fn qp_hand_stepped_quadratic_trace() {
        let cfg = QpConfig::new(0.5, 1.75, 1, 0.0).unwrap();
        let (mut w, mut prev_grad, mut prev_delta) = (1.0f64, 0.0f64, 0.0f64);
        let mut trace = vec![w];
        for _ in 0..4 {
            let g = w;
            let d = qp_step(g, prev_grad, prev_delta, &cfg);
            w += d;
            prev_grad = g;
            prev_delta = d;
            trace.push(w);
        }
        assert_eq!(trace, vec![1.0, 0.5, -0.25, 0.0, 0.0]);
    }

    #[test]
    fn single_epoch_is_one_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&mut rng, 2, 3, 2, 0.5);
        let samples = vec![sample(&[0.1, 0.9], 0), sample(&[0.8, 0.2], 1)];
        let cfg = QpConfig::new(0.3, 1.75, 1, 0.0).unwrap();
        let grad = net.batch_gradient(&samples).unwrap();
        let (trained, report) = train_qp(&net, &samples, &cfg).unwrap();
        assert_eq!(report.epochs_run, 1);
        let before = net.w_ih().as_slice().iter().chain(net.w_ho().as_slice());
        let after = trained.w_ih().as_slice().iter().chain(trained.w_ho().as_slice());
        for ((b, a), g) in before.zip(after).zip(grad.iter()) {
            assert_eq!(*a, b + -0.3 * g);
        }
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let net = MlpNetwork::from_weights(
            Matrix::from_rows(vec![vec![0.4, 0.1]]).unwrap(),
            Matrix::from_rows(vec![vec![-0.2, 0.3]]).unwrap(),
        )
        .unwrap();
        let samples = vec![sample(&[1.0], 0)];
        let cfg = QpConfig::new(0.5, 1.75, 1, 0.1).unwrap();
        let grad = net.batch_gradient(&samples).unwrap();
        let (trained, _) = train_qp(&net, &samples, &cfg).unwrap();
        let w0 = net.w_ih().get(0, 0);
        assert_eq!(trained.w_ih().get(0, 0), w0 - 0.5 * (grad.w_ih.get(0, 0) + 0.1 * w0));
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_net(&mut rng, 3, 5, 3, 0.5);
        let samples: Vec<Sample> = (0..20)
            .map(|i| sample(&[rng.random(), rng.random(), rng.random()], i % 3))
            .collect();
        let cfg = QpConfig::new(0.1, 1.75, 40, 0.0).unwrap();
        let a = train_qp(&net, &samples, &cfg).unwrap();
        let b = train_qp(&net, &samples, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.0.w_ih().is_finite() && a.0.w_ho().is_finite());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let net = MlpNetwork::zeros(2, 2, 2);
        let cfg = QpConfig::new(0.1, 1.75, 5, 0.0).unwrap();
        let (trained, report) = train_epochs(&net, &[sample(&[0.0, 1.0], 1)], &cfg, 0).unwrap();
        assert_eq!(trained, net);
        assert_eq!(report.epochs_run, 0);
    }

    #[test]
    fn divergence_is_reported() {
        // 1e306 * 1e3 overflows, and +inf + -inf poisons the pre-activation.
        let w = 1e306;
        let net = MlpNetwork::from_weights(
            Matrix::from_rows(vec![vec![w, -w, 0.0]]).unwrap(),
            Matrix::from_rows(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let samples = vec![sample(&[1e3, 1e3], 0), sample(&[0.0, 0.0], 1)];
        let cfg = QpConfig::new(10.0, 4.0, 50, 0.0).unwrap();
        match train_qp(&net, &samples, &cfg) {
            Err(MlpError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
