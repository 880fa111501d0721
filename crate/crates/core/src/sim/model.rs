//! Task models for the simulator: synthetic linear regression and
//! Gaussian-blob multinomial logistic regression, with their gradients,
//! local fits, and evaluation metrics.
//!
//! Updates travel as flat vectors. Linear parameters are used as-is
//! (length = dim); logistic parameters are the classes x dim weight matrix
//! flattened row-major, class by class.

use super::SimError;
use crate::harness::config::TaskModel;
use crate::seedmix;
use crate::update::PartyId;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Task ground truth drawn from the experiment seed.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Linear { true_w: DVector<f64> },
    Logistic { class_means: Vec<DVector<f64>> },
}

impl GroundTruth {
    pub fn generate(model: &TaskModel, seed: u64) -> Self {
        let mut rng = seedmix::stream(seed, "truth", 0, 0);
        match model {
            TaskModel::LinearRegression { dim, .. } => {
                let true_w = DVector::from_fn(*dim, |_, _| StandardNormal.sample(&mut rng));
                GroundTruth::Linear { true_w }
            }
            TaskModel::LogisticRegression {
                dim,
                classes,
                class_spread,
                ..
            } => {
                let class_means = (0..*classes)
                    .map(|_| {
                        DVector::from_fn(*dim, |_, _| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * class_spread
                        })
                    })
                    .collect();
                GroundTruth::Logistic { class_means }
            }
        }
    }
}

/// One labeled example as seen by a party: features plus a regression
/// target or class label.
#[derive(Debug, Clone)]
pub enum Example {
    Regression { x: DVector<f64>, y: f64 },
    Classification { x: DVector<f64>, label: usize },
}

/// Shared example pool. Feature vectors and raw noise draws are stored
/// once; parties materialize their own label views so per-party noise
/// levels scale a shared draw rather than resampling it.
#[derive(Debug, Clone)]
pub struct Pool {
    xs: Vec<DVector<f64>>,
    /// Regression: standard-normal label noise per example.
    eps: Vec<f64>,
    /// Classification: true class per example.
    classes: Vec<usize>,
}

impl Pool {
    pub fn generate(model: &TaskModel, truth: &GroundTruth, size: usize, seed: u64) -> Self {
        let mut rng = seedmix::stream(seed, "pool", 0, 0);
        match (model, truth) {
            (TaskModel::LinearRegression { dim, feature_scale, .. }, GroundTruth::Linear { .. }) => {
                let mut xs = Vec::with_capacity(size);
                let mut eps = Vec::with_capacity(size);
                for _ in 0..size {
                    xs.push(DVector::from_fn(*dim, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * feature_scale
                    }));
                    eps.push(StandardNormal.sample(&mut rng));
                }
                Pool {
                    xs,
                    eps,
                    classes: Vec::new(),
                }
            }
            (
                TaskModel::LogisticRegression { dim, classes, .. },
                GroundTruth::Logistic { class_means },
            ) => {
                let mut xs = Vec::with_capacity(size);
                let mut labels = Vec::with_capacity(size);
                for _ in 0..size {
                    let c = rng.random_range(0..*classes);
                    let mean = &class_means[c];
                    xs.push(DVector::from_fn(*dim, |r, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean[r] + z
                    }));
                    labels.push(c);
                }
                Pool {
                    xs,
                    eps: Vec::new(),
                    classes: labels,
                }
            }
            _ => unreachable!("ground truth matches the task model"),
        }
    }

    /// Materialize a party's local dataset from its pool indices. The
    /// party's noise level scales the label noise of its private examples
    /// (regression) or its label-flip rate (classification); examples in
    /// `shared` belong to a common block whose labels are identical for
    /// every holder, so overlapping parties see correlated noise.
    pub fn party_view(
        &self,
        model: &TaskModel,
        truth: &GroundTruth,
        indices: &[usize],
        shared: &std::collections::BTreeSet<usize>,
        noise_level: f64,
        seed: u64,
        party: PartyId,
    ) -> Vec<Example> {
        match (model, truth) {
            (TaskModel::LinearRegression { label_noise, .. }, GroundTruth::Linear { true_w }) => {
                indices
                    .iter()
                    .map(|&e| {
                        let level = if shared.contains(&e) { 1.0 } else { noise_level };
                        Example::Regression {
                            x: self.xs[e].clone(),
                            y: true_w.dot(&self.xs[e]) + label_noise * level * self.eps[e],
                        }
                    })
                    .collect()
            }
            (
                TaskModel::LogisticRegression {
                    classes,
                    label_flip_rate,
                    ..
                },
                GroundTruth::Logistic { .. },
            ) => {
                let rate = (label_flip_rate * noise_level).clamp(0.0, 0.9);
                indices
                    .iter()
                    .map(|&e| {
                        let mut label = self.classes[e];
                        if rate > 0.0 {
                            let mut rng = seedmix::stream(seed, "flip", party.0 as u64, e as u64);
                            if rng.random::<f64>() < rate {
                                let shift = rng.random_range(1..*classes);
                                label = (label + shift) % classes;
                            }
                        }
                        Example::Classification {
                            x: self.xs[e].clone(),
                            label,
                        }
                    })
                    .collect()
            }
            _ => unreachable!("ground truth matches the task model"),
        }
    }

    /// Held-out evaluation set. Regression targets are noiseless, so the
    /// test MSE measures prediction error against the true function with
    /// no irreducible floor; classification labels are unflipped.
    pub fn test_view(&self, model: &TaskModel, truth: &GroundTruth) -> Vec<Example> {
        match (model, truth) {
            (TaskModel::LinearRegression { .. }, GroundTruth::Linear { true_w }) => (0..self
                .xs
                .len())
                .map(|e| Example::Regression {
                    x: self.xs[e].clone(),
                    y: true_w.dot(&self.xs[e]),
                })
                .collect(),
            (TaskModel::LogisticRegression { .. }, GroundTruth::Logistic { .. }) => (0..self
                .xs
                .len())
                .map(|e| Example::Classification {
                    x: self.xs[e].clone(),
                    label: self.classes[e],
                })
                .collect(),
            _ => unreachable!(),
        }
    }
}

/// Model parameters in structured form, convertible to and from the flat
/// update vector.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Linear(DVector<f64>),
    /// classes x dim weight matrix.
    Logistic(DMatrix<f64>),
}

impl ModelParams {
    pub fn zeros(model: &TaskModel) -> Self {
        match model {
            TaskModel::LinearRegression { dim, .. } => ModelParams::Linear(DVector::zeros(*dim)),
            TaskModel::LogisticRegression { dim, classes, .. } => {
                ModelParams::Logistic(DMatrix::zeros(*classes, *dim))
            }
        }
    }

    /// Length of the flat update vector.
    pub fn flat_dim(model: &TaskModel) -> usize {
        match model {
            TaskModel::LinearRegression { dim, .. } => *dim,
            TaskModel::LogisticRegression { dim, classes, .. } => dim * classes,
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        match self {
            ModelParams::Linear(w) => w.clone(),
            ModelParams::Logistic(w) => {
                let (classes, dim) = w.shape();
                DVector::from_fn(classes * dim, |i, _| w[(i / dim, i % dim)])
            }
        }
    }

    pub fn from_flat(model: &TaskModel, flat: &DVector<f64>) -> Self {
        match model {
            TaskModel::LinearRegression { .. } => ModelParams::Linear(flat.clone()),
            TaskModel::LogisticRegression { dim, classes, .. } => ModelParams::Logistic(
                DMatrix::from_fn(*classes, *dim, |r, c| flat[r * dim + c]),
            ),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ModelParams::Linear(w) => w.iter().all(|v| v.is_finite()),
            ModelParams::Logistic(w) => w.iter().all(|v| v.is_finite()),
        }
    }
}

/// Mean gradient of the loss over a batch, as a flat vector.
///
/// Regression uses the squared loss (w.x - y)^2 / 2 per example; the
/// classification loss is softmax cross-entropy.
pub fn mean_gradient(params: &ModelParams, batch: &[&Example]) -> DVector<f64> {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    match params {
        ModelParams::Linear(w) => {
            let mut grad = DVector::zeros(w.len());
            for e in batch {
                let Example::Regression { x, y } = e else {
                    panic!("regression gradient on classification data")
                };
                grad.axpy(w.dot(x) - y, x, 1.0);
            }
            grad / batch.len() as f64
        }
        ModelParams::Logistic(w) => {
            let (classes, dim) = w.shape();
            let mut grad = DMatrix::zeros(classes, dim);
            for e in batch {
                let Example::Classification { x, label } = e else {
                    panic!("classification gradient on regression data")
                };
                let p = softmax(&(w * x));
                for c in 0..classes {
                    let coef = p[c] - if c == *label { 1.0 } else { 0.0 };
                    for d in 0..dim {
                        grad[(c, d)] += coef * x[d];
                    }
                }
            }
            let grad = grad / batch.len() as f64;
            ModelParams::Logistic(grad).to_flat()
        }
    }
}

/// Mean loss over a batch (squared loss / 2 or cross-entropy).
pub fn mean_loss(params: &ModelParams, batch: &[&Example]) -> f64 {
    match params {
        ModelParams::Linear(w) => {
            batch
                .iter()
                .map(|e| {
                    let Example::Regression { x, y } = e else {
                        panic!("regression loss on classification data")
                    };
                    0.5 * (w.dot(x) - y).powi(2)
                })
                .sum::<f64>()
                / batch.len() as f64
        }
        ModelParams::Logistic(w) => {
            batch
                .iter()
                .map(|e| {
                    let Example::Classification { x, label } = e else {
                        panic!("classification loss on regression data")
                    };
                    let logits = w * x;
                    let lse = log_sum_exp(&logits);
                    lse - logits[*label]
                })
                .sum::<f64>()
                / batch.len() as f64
        }
    }
}

/// Test metric: MSE for regression (lower is better), accuracy for
/// classification (higher is better).
pub fn evaluate(params: &ModelParams, test: &[Example]) -> f64 {
    match params {
        ModelParams::Linear(w) => {
            test.iter()
                .map(|e| {
                    let Example::Regression { x, y } = e else {
                        panic!("regression metric on classification data")
                    };
                    (w.dot(x) - y).powi(2)
                })
                .sum::<f64>()
                / test.len() as f64
        }
        ModelParams::Logistic(w) => {
            let correct = test
                .iter()
                .filter(|e| {
                    let Example::Classification { x, label } = e else {
                        panic!("classification metric on regression data")
                    };
                    argmax(&(w * x)) == *label
                })
                .count();
            correct as f64 / test.len() as f64
        }
    }
}

/// Local full-batch gradient descent: `steps` iterations or gradient norm
/// below `tol`. Returns the fitted parameters and whether the fit stayed
/// finite (on divergence the last finite iterate is returned).
pub fn fit_local(
    model: &TaskModel,
    data: &[Example],
    steps: usize,
    lr: f64,
    tol: f64,
) -> Result<(ModelParams, bool), SimError> {
    if data.is_empty() {
        return Err(SimError::InvalidSpec("local fit with no data".into()));
    }
    let refs: Vec<&Example> = data.iter().collect();
    let mut params = ModelParams::zeros(model);
    let mut flat = params.to_flat();
    for _ in 0..steps {
        let grad = mean_gradient(&params, &refs);
        if grad.norm() < tol {
            break;
        }
        let next = &flat - grad * lr;
        if next.iter().any(|v| !v.is_finite()) {
            return Ok((ModelParams::from_flat(model, &flat), false));
        }
        flat = next;
        params = ModelParams::from_flat(model, &flat);
    }
    Ok((params, true))
}

fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exps = logits.map(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

fn log_sum_exp(logits: &DVector<f64>) -> f64 {
    let max = logits.max();
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
