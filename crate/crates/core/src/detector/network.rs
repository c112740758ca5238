//! Binary classifier behind the detector and its training loop.
//!
//! Two shapes are supported: a single rectified-linear hidden layer feeding
//! a logistic output, and plain logistic regression. Both minimize binary
//! cross-entropy with Adam over shuffled mini-batches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::LabeledSet;
use super::metrics::{fit_quality, FitQuality};
use crate::error::{Error, Result};
use crate::seed;
use crate::trace::NeuronId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Mlp { hidden: usize },
    Linear,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp { hidden: 128 }
    }
}

/// What to do with the step size between epochs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// If an epoch raises the training loss, undo it and halve the step.
    /// Recorded epoch losses are then non-increasing.
    HalveOnIncrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: StepSchedule,
    /// Fit a per-feature min-max scaler on the training set.
    pub min_max_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: StepSchedule::Constant,
            min_max_scale: false,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against label `y`, computed stably.
#[inline]
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Double-precision network used during training and gradient checks.
///
/// Flat parameter layout:
/// - MLP: `W1 (hidden x n_in) | b1 (hidden) | w2 (hidden) | b2`
/// - linear: `w (n_in) | b`
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub n_inputs: usize,
    pub architecture: Architecture,
    pub params: Vec<f64>,
}

impl Network {
    pub fn param_count(n_inputs: usize, architecture: Architecture) -> usize {
        match architecture {
            Architecture::Mlp { hidden } => hidden * n_inputs + 2 * hidden + 1,
            Architecture::Linear => n_inputs + 1,
        }
    }

    /// Uniform initialization scaled by fan-in plus fan-out.
    pub fn init<R: Rng + ?Sized>(n_inputs: usize, architecture: Architecture, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(Self::param_count(n_inputs, architecture));
        let mut uniform = |count: usize, fan_in: usize, fan_out: usize, factor: f64| {
            let bound = (factor / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..count {
                params.push(rng.random_range(-bound..bound));
            }
        };
        match architecture {
            Architecture::Mlp { hidden } => {
                uniform(hidden * n_inputs + hidden, n_inputs, hidden, 6.0);
                uniform(hidden + 1, hidden, 1, 2.0);
            }
            Architecture::Linear => uniform(n_inputs + 1, n_inputs, 1, 2.0),
        }
        Self {
            n_inputs,
            architecture,
            params,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        logit_with(&self.params, self.n_inputs, self.architecture, x)
    }

    /// Mean loss over `rows`, accumulating its gradient into `grad`.
    pub fn loss_and_grad(&self, rows: &[&[f64]], labels: &[u8], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = self.n_inputs;
        let inv = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        match self.architecture {
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * n);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut pre = vec![0.0; hidden];
                for (x, &y) in rows.iter().zip(labels) {
                    let mut z = b2[0];
                    for j in 0..hidden {
                        pre[j] = b1[j] + dot(&w1[j * n..(j + 1) * n], x);
                        z += w2[j] * pre[j].max(0.0);
                    }
                    let y = y as f64;
                    loss += bce_with_logit(z, y);
                    let dz = (sigmoid(z) - y) * inv;
                    let (gw1, grest) = grad.split_at_mut(hidden * n);
                    let (gb1, grest) = grest.split_at_mut(hidden);
                    let (gw2, gb2) = grest.split_at_mut(hidden);
                    gb2[0] += dz;
                    for j in 0..hidden {
                        if pre[j] > 0.0 {
                            gw2[j] += dz * pre[j];
                            let dh = dz * w2[j];
                            gb1[j] += dh;
                            for (g, xi) in gw1[j * n..(j + 1) * n].iter_mut().zip(x.iter()) {
                                *g += dh * xi;
                            }
                        }
                    }
                }
            }
            Architecture::Linear => {
                let (w, b) = self.params.split_at(n);
                for (x, &y) in rows.iter().zip(labels) {
                    let z = b[0] + dot(w, x);
                    let y = y as f64;
                    loss += bce_with_logit(z, y);
                    let dz = (sigmoid(z) - y) * inv;
                    for (g, xi) in grad[..n].iter_mut().zip(x.iter()) {
                        *g += dz * xi;
                    }
                    grad[n] += dz;
                }
            }
        }
        loss * inv
    }

    pub fn loss(&self, rows: &[&[f64]], labels: &[u8]) -> f64 {
        let mut grad = vec![0.0; self.params.len()];
        self.loss_and_grad(rows, labels, &mut grad)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward pass over a flat parameter slice of any float width.
fn logit_with<P: Copy + Into<f64>>(
    params: &[P],
    n: usize,
    architecture: Architecture,
    x: &[f64],
) -> f64 {
    let p = |i: usize| -> f64 { params[i].into() };
    match architecture {
        Architecture::Mlp { hidden } => {
            let b1 = hidden * n;
            let w2 = b1 + hidden;
            let b2 = w2 + hidden;
            let mut z = p(b2);
            for j in 0..hidden {
                let mut h = p(b1 + j);
                for (i, xi) in x.iter().enumerate() {
                    h += p(j * n + i) * xi;
                }
                z += p(w2 + j) * h.max(0.0);
            }
            z
        }
        Architecture::Linear => {
            let mut z = p(n);
            for (i, xi) in x.iter().enumerate() {
                z += p(i) * xi;
            }
            z
        }
    }
}

/// Per-feature min-max scaler, fit on training data only.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl MinMaxScaler {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let n = rows.first().map_or(0, |r| r.len());
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for r in rows {
            for (i, &v) in r.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Self {
            min: min.into_iter().map(|v| v as f32).collect(),
            max: max.into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                let (lo, hi) = (lo as f64, hi as f64);
                if hi > lo {
                    (v - lo) / (hi - lo)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Trained detector. Weights are kept at single precision so the on-disk
/// form reproduces predictions exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct VaDetector {
    pub neuron_order: Vec<NeuronId>,
    pub beta: f64,
    pub architecture: Architecture,
    pub train_config: TrainConfig,
    pub params: Vec<f32>,
    pub scaler: Option<MinMaxScaler>,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_absent: f64,
    /// 1 iff `p_absent > 0.5`.
    pub label: u8,
}

impl VaDetector {
    pub fn n_inputs(&self) -> usize {
        self.neuron_order.len()
    }

    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "detector expects {} features, got {}",
                self.n_inputs(),
                features.len()
            )));
        }
        let z = match &self.scaler {
            Some(s) => logit_with(
                &self.params,
                self.n_inputs(),
                self.architecture,
                &s.transform(features),
            ),
            None => logit_with(&self.params, self.n_inputs(), self.architecture, features),
        };
        Ok(z)
    }

    pub fn evaluate(&self, set: &LabeledSet) -> Result<FitQuality> {
        let preds = set
            .features
            .iter()
            .map(|f| predict(self, &f.values).map(|p| p.label))
            .collect::<Result<Vec<u8>>>()?;
        fit_quality(&preds, &set.labels)
    }
}

pub fn predict(detector: &VaDetector, features: &[f64]) -> Result<Prediction> {
    let p = sigmoid(detector.logit(features)?);
    Ok(Prediction {
        p_absent: p,
        label: u8::from(p > 0.5),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full-training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Step size in effect after each epoch.
    pub learning_rates: Vec<f64>,
    pub final_loss: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

pub fn train_detector(
    train: &LabeledSet,
    beta: f64,
    cfg: &TrainConfig,
) -> Result<(VaDetector, TrainReport)> {
    let [pre, abs] = train.class_counts();
    if pre == 0 || abs == 0 {
        return Err(Error::EmptyLabelSet(format!(
            "training set has {pre} present and {abs} absent examples"
        )));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    if let Architecture::Mlp { hidden: 0 } = cfg.architecture {
        return Err(Error::InvalidArgument("hidden width must be positive".into()));
    }
    let n_inputs = train.neuron_order.len();
    if n_inputs == 0 {
        return Err(Error::NoNeurons);
    }
    let scaler = cfg.min_max_scale.then(|| MinMaxScaler::fit(&train.rows()));
    let rows_owned: Vec<Vec<f64>> = match &scaler {
        Some(s) => train.features.iter().map(|f| s.transform(&f.values)).collect(),
        None => train.features.iter().map(|f| f.values.clone()).collect(),
    };
    let rows: Vec<&[f64]> = rows_owned.iter().map(Vec::as_slice).collect();
    let labels = &train.labels;

    let mut rng = seed::rng(seed::derive(cfg.seed, "detector-train"));
    let mut net = Network::init(n_inputs, cfg.architecture, &mut rng);
    let n_params = net.params.len();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut grad = vec![0.0; n_params];
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut rates = Vec::with_capacity(cfg.epochs);
    let mut prev_loss = net.loss(&rows, labels);
    let mut batch_rows: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut batch_labels: Vec<u8> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let snapshot = (net.params.clone(), adam.m.clone(), adam.v.clone(), adam.t);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch_rows.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_rows.push(rows[i]);
                batch_labels.push(labels[i]);
            }
            net.loss_and_grad(&batch_rows, &batch_labels, &mut grad);
            adam.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(adam.t);
            let bc2 = 1.0 - cfg.beta2.powi(adam.t);
            for k in 0..n_params {
                adam.m[k] = cfg.beta1 * adam.m[k] + (1.0 - cfg.beta1) * grad[k];
                adam.v[k] = cfg.beta2 * adam.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
                let m_hat = adam.m[k] / bc1;
                let v_hat = adam.v[k] / bc2;
                net.params[k] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        let mut loss = net.loss(&rows, labels);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "loss {loss} at epoch {epoch} (step size {lr}, {} examples)",
                rows.len()
            )));
        }
        if cfg.schedule == StepSchedule::HalveOnIncrease && loss > prev_loss {
            net.params = snapshot.0;
            adam.m = snapshot.1;
            adam.v = snapshot.2;
            adam.t = snapshot.3;
            lr *= 0.5;
            loss = prev_loss;
        }
        losses.push(loss);
        rates.push(lr);
        prev_loss = loss;
    }

    let params: Vec<f32> = net.params.iter().map(|&p| p as f32).collect();
    let detector = VaDetector {
        neuron_order: train.neuron_order.clone(),
        beta,
        architecture: cfg.architecture,
        train_config: cfg.clone(),
        params,
        scaler,
        final_train_loss: prev_loss,
    };
    log::debug!(
        "trained detector on {} examples, {} inputs, final loss {prev_loss:.6}",
        rows.len(),
        n_inputs
    );
    Ok((
        detector,
        TrainReport {
            epoch_losses: losses,
            learning_rates: rates,
            final_loss: prev_loss,
        },
    ))
}
