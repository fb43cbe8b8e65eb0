//! From-scratch classifiers and the local mini-batch SGD trainer.
//!
//! Parameters live in one flat vector. For each layer (input to output) the
//! weight matrix is stored row-major as `[out][in]`, followed by the `out`
//! biases. A softmax-linear model is the zero-hidden-layer case; hidden layers
//! use `tanh`, which keeps the loss smooth for finite-difference checks.

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::synthdata::ClientDataset;
use crate::{MmflError, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    SoftmaxLinear,
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub num_labels: usize,
}

impl ModelSpec {
    pub fn softmax_linear(feature_dim: usize, num_labels: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxLinear,
            feature_dim,
            num_labels,
        }
    }

    pub fn mlp(feature_dim: usize, hidden: Vec<usize>, num_labels: usize) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden },
            feature_dim,
            num_labels,
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_dim];
        if let ModelKind::Mlp { hidden } = &self.kind {
            w.extend_from_slice(hidden);
        }
        w.push(self.num_labels);
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }
}

/// Flat parameter (or update) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T>(pub Vec<T>);

impl<T: Scalar> WeightVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    /// Scaled-uniform initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let mut v = Vec::with_capacity(spec.parameter_count());
        for pair in spec.widths().windows(2) {
            let (fan_in, out) = (pair[0], pair[1]);
            let a = 1.0 / (fan_in as f64).sqrt();
            v.extend((0..fan_in * out).map(|_| T::lit(rng.random_range(-a..a))));
            v.extend(std::iter::repeat_n(T::zero(), out));
        }
        Self(v)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> T {
        crate::scalar::norm(&self.0)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: T, x: &[T]) {
        for (a, &b) in self.0.iter_mut().zip(x) {
            *a = *a + alpha * b;
        }
    }
}

impl<T> Deref for WeightVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for WeightVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

fn check_dims<T: Scalar>(weights: &[T], data: &ClientDataset<T>, spec: &ModelSpec) -> Result<()> {
    if weights.len() != spec.parameter_count() {
        return Err(MmflError::DimensionMismatch {
            expected: spec.parameter_count(),
            actual: weights.len(),
        });
    }
    if let Some(x) = data.features.iter().find(|x| x.len() != spec.feature_dim) {
        return Err(MmflError::DimensionMismatch {
            expected: spec.feature_dim,
            actual: x.len(),
        });
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= spec.num_labels) {
        return Err(MmflError::DimensionMismatch {
            expected: spec.num_labels,
            actual: y + 1,
        });
    }
    Ok(())
}

/// Forward pass; returns the activations of every layer (input first, logits last).
fn forward<T: Scalar>(weights: &[T], widths: &[usize], x: &[T]) -> Vec<Vec<T>> {
    let mut acts = Vec::with_capacity(widths.len());
    acts.push(x.to_vec());
    let mut offset = 0;
    let last = widths.len() - 2;
    for (l, pair) in widths.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        let w = &weights[offset..offset + n_in * n_out];
        let b = &weights[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let input = &acts[l];
        let z: Vec<T> = (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                b[o] + crate::scalar::dot(row, input)
            })
            .collect();
        acts.push(if l == last {
            z
        } else {
            z.into_iter().map(T::tanh).collect()
        });
    }
    acts
}

/// Returns `(log-sum-exp(z) - z_y, softmax(z))`.
fn cross_entropy<T: Scalar>(logits: &[T], y: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() + max - logits[y];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

/// Mean loss and gradient over `indices`; gradient accumulates into `grad`.
fn loss_and_grad<T: Scalar>(
    weights: &[T],
    widths: &[usize],
    data: &ClientDataset<T>,
    indices: &[usize],
    grad: &mut [T],
) -> T {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let mut total = T::zero();
    let layers = widths.len() - 1;
    // Offsets of each layer's weight block.
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for pair in widths.windows(2) {
        offsets.push(off);
        off += pair[0] * pair[1] + pair[1];
    }
    for &idx in indices {
        let acts = forward(weights, widths, &data.features[idx]);
        let (loss, probs) = cross_entropy(&acts[layers], data.labels[idx]);
        total = total + loss;
        let mut delta = probs;
        delta[data.labels[idx]] = delta[data.labels[idx]] - T::one();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let base = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                let row = &mut grad[base + o * n_in..base + (o + 1) * n_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g = *g + d * a;
                }
                grad[base + n_in * n_out + o] = grad[base + n_in * n_out + o] + d;
            }
            if l > 0 {
                let w = &weights[base..base + n_in * n_out];
                delta = (0..n_in)
                    .map(|j| {
                        let back = (0..n_out).fold(T::zero(), |acc, o| acc + w[o * n_in + j] * delta[o]);
                        back * (T::one() - input[j] * input[j])
                    })
                    .collect();
            }
        }
    }
    let n = T::from_usize_lossy(indices.len());
    grad.iter_mut().for_each(|g| *g = *g / n);
    total / n
}

/// Mean cross-entropy of the model over the whole dataset.
pub fn loss<T: Scalar>(weights: &[T], data: &ClientDataset<T>, spec: &ModelSpec) -> Result<T> {
    if data.is_empty() {
        return Err(MmflError::EmptyDataset);
    }
    check_dims(weights, data, spec)?;
    let widths = spec.widths();
    let last = widths.len() - 1;
    let total = data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| cross_entropy(&forward(weights, &widths, x)[last], y).0)
        .fold(T::zero(), |a, b| a + b);
    Ok(total / T::from_usize_lossy(data.len()))
}

/// Exact gradient of the mean loss over `batch`.
pub fn gradient<T: Scalar>(weights: &[T], batch: &ClientDataset<T>, spec: &ModelSpec) -> Result<Vec<T>> {
    if batch.is_empty() {
        return Err(MmflError::EmptyDataset);
    }
    check_dims(weights, batch, spec)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![T::zero(); weights.len()];
    loss_and_grad(weights, &spec.widths(), batch, &idx, &mut grad);
    Ok(grad)
}

/// Fraction of correctly classified samples.
pub fn accuracy<T: Scalar>(weights: &[T], data: &ClientDataset<T>, spec: &ModelSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(MmflError::EmptyDataset);
    }
    check_dims(weights, data, spec)?;
    let widths = spec.widths();
    let last = widths.len() - 1;
    let correct = data
        .features
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| {
            let logits = &forward(weights, &widths, x)[last];
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0);
            best == y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `eta = scale / ((round + 1) * K + gamma)`, where
    /// `gamma = max(gamma_floor, 4 K * last realised step size)`.
    InverseRound { scale: f64, gamma_floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalMode {
    /// `K` full passes over the shuffled local data.
    Epochs,
    /// `K` mini-batch steps.
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub mode: LocalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            batch_size: 10,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Constant,
            mode: LocalMode::Epochs,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.local_epochs == 0 {
            return Err("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be > 0".into());
        }
        Ok(())
    }

    /// Learning rate `eta_{round}`; `last_step_size` feeds the inverse schedule.
    pub fn learning_rate_at(&self, round: usize, last_step_size: f64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::InverseRound { scale, gamma_floor } => {
                let k = self.local_epochs as f64;
                let gamma = gamma_floor.max(4.0 * k * last_step_size);
                scale / ((round as f64 + 1.0) * k + gamma)
            }
        }
    }
}

/// Which processor/model/round a training run belongs to (error context only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainContext {
    pub client: usize,
    pub model: usize,
    pub round: usize,
}

/// Result of one local run: `G = eta * sum_t grad_t`, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun<T> {
    pub delta: WeightVector<T>,
    pub steps: usize,
}

/// Runs local SGD from `weights_init` and returns the accumulated change
/// `G` (so the new weights are `weights_init - G`).
pub fn local_train<T: Scalar, R: Rng + ?Sized>(
    weights_init: &[T],
    data: &ClientDataset<T>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    learning_rate: T,
    ctx: TrainContext,
    rng: &mut R,
) -> Result<LocalRun<T>> {
    if data.is_empty() {
        return Err(MmflError::EmptyDataset);
    }
    check_dims(weights_init, data, spec)?;
    let widths = spec.widths();
    let mut w = weights_init.to_vec();
    let mut delta = WeightVector::zeros(w.len());
    let mut grad = vec![T::zero(); w.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = cfg.batch_size.min(data.len());
    let mut steps = 0;
    for epoch in 0.. {
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let l = loss_and_grad(&w, &widths, data, &batch, &mut grad);
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(MmflError::Divergence {
                    round: ctx.round,
                    client: ctx.client,
                    model: ctx.model,
                });
            }
            for (wi, &g) in w.iter_mut().zip(&grad) {
                *wi = *wi - learning_rate * g;
            }
            for (di, &g) in delta.iter_mut().zip(&grad) {
                *di = *di + learning_rate * g;
            }
            steps += 1;
            if cfg.mode == LocalMode::Steps && steps == cfg.local_epochs {
                return Ok(LocalRun { delta, steps });
            }
        }
        if cfg.mode == LocalMode::Epochs && epoch + 1 == cfg.local_epochs {
            break;
        }
    }
    Ok(LocalRun { delta, steps })
}
