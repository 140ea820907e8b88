//! Soft-margin linear SVM trained with SMO, and selection of the
//! non-vulnerable support vectors ("important samples").
//!
//! Labels are encoded as vulnerable → +1, non-vulnerable → −1. The solver
//! minimizes the dual `½αᵀQα − Σα` subject to `0 ≤ α ≤ C`, `yᵀα = 0` with
//! maximal-gain (second-order) working-set selection.

use crate::corpus::{CodeSample, Label};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SvmError {
    #[error("need at least two points of each class (got {positive} positive, {negative} negative)")]
    SingleClass { positive: usize, negative: usize },
    #[error("regularization C must be positive and finite, got {0}")]
    BadC(f64),
    #[error("labels must be +1 or -1; found {0}")]
    BadLabel(f64),
    #[error("input contains non-finite values at row {0}")]
    NonFinite(usize),
    #[error("rows have inconsistent widths or do not match labels")]
    Shape,
    #[error("no non-vulnerable support vectors; try a different C")]
    NoImportantSamples,
    #[error("model was trained on {trained} points but {given} samples were supplied")]
    Misaligned { trained: usize, given: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    /// Stopping tolerance on the maximal KKT violation.
    pub tolerance: f64,
    /// Dual coefficients above this are support vectors.
    pub support_threshold: f64,
    pub max_iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            tolerance: 1e-5,
            support_threshold: 1e-6,
            max_iterations: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
    pub alphas: Vec<f64>,
    pub labels: Vec<f64>,
    pub support_indices: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }

    /// Hinge slacks `max(0, 1 − y f(x))` for the training points.
    pub fn slacks(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter()
            .zip(&self.labels)
            .map(|(xi, yi)| (1.0 - yi * self.decision(xi)).max(0.0))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const TAU: f64 = 1e-12;

fn validate(x: &[Vec<f64>], y: &[f64], c: f64) -> Result<(), SvmError> {
    if !(c.is_finite() && c > 0.0) {
        return Err(SvmError::BadC(c));
    }
    if x.len() != y.len() || x.iter().any(|r| r.len() != x[0].len()) {
        return Err(SvmError::Shape);
    }
    if let Some(bad) = y.iter().find(|v| **v != 1.0 && **v != -1.0) {
        return Err(SvmError::BadLabel(*bad));
    }
    if let Some(row) = x.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(SvmError::NonFinite(row));
    }
    let positive = y.iter().filter(|v| **v > 0.0).count();
    let negative = y.len() - positive;
    if positive == 0 || negative == 0 {
        return Err(SvmError::SingleClass { positive, negative });
    }
    Ok(())
}

pub fn train_svm(x: &[Vec<f64>], y: &[f64], config: &SvmConfig) -> Result<SvmModel, SvmError> {
    validate(x, y, config.c)?;
    let n = x.len();
    let c = config.c;
    let diag: Vec<f64> = x.iter().map(|r| dot(r, r)).collect();
    let kernel_row = |i: usize| -> Vec<f64> { x.iter().map(|r| dot(&x[i], r)).collect() };

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i_sel = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            if in_low(alpha[t], y[t]) {
                gmin = gmin.min(-y[t] * grad[t]);
            }
        }
        if i_sel == usize::MAX || gmax - gmin < config.tolerance {
            converged = true;
            break;
        }
        let i = i_sel;
        let ki = kernel_row(i);
        let mut j_sel = usize::MAX;
        let mut best_gain = f64::INFINITY;
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let mut a = diag[i] + diag[t] - 2.0 * ki[t];
                if a <= 0.0 {
                    a = TAU;
                }
                let gain = -(b * b) / a;
                if gain <= best_gain {
                    best_gain = gain;
                    j_sel = t;
                }
            }
        }
        if j_sel == usize::MAX {
            converged = true;
            break;
        }
        let j = j_sel;
        let kj = kernel_row(j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * ki[j];
        if y[i] != y[j] {
            let mut quad = diag[i] + diag[j] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = diag[i] + diag[j] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        iterations += 1;
    }

    // Offset from free vectors, or the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };

    let dim = x[0].len();
    let mut w = vec![0.0; dim];
    for t in 0..n {
        if alpha[t] > 0.0 {
            for (wk, xk) in w.iter_mut().zip(&x[t]) {
                *wk += alpha[t] * y[t] * xk;
            }
        }
    }
    let support_indices = (0..n).filter(|&t| alpha[t] > config.support_threshold).collect();
    Ok(SvmModel {
        w,
        b: -rho,
        c,
        alphas: alpha,
        labels: y.to_vec(),
        support_indices,
        iterations,
        converged,
    })
}

/// Label vector for samples: vulnerable → +1, non-vulnerable → −1.
pub fn encode_labels(samples: &[CodeSample]) -> Vec<f64> {
    samples.iter().map(|s| s.label.sign()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportantSample {
    pub index: usize,
    pub id: String,
    pub alpha: f64,
    pub representation: Vec<f64>,
}

/// Non-vulnerable support vectors, by descending dual coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportantSampleSet {
    pub members: Vec<ImportantSample>,
}

impl ImportantSampleSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `representations` must be the rows the model was trained on, aligned with `samples`.
pub fn important_samples(
    model: &SvmModel,
    samples: &[CodeSample],
    representations: &[Vec<f64>],
) -> Result<ImportantSampleSet, SvmError> {
    if samples.len() != model.alphas.len() || representations.len() != samples.len() {
        return Err(SvmError::Misaligned {
            trained: model.alphas.len(),
            given: samples.len(),
        });
    }
    let mut members: Vec<ImportantSample> = model
        .support_indices
        .iter()
        .filter(|&&i| samples[i].label == Label::Nonvulnerable)
        .map(|&i| ImportantSample {
            index: i,
            id: samples[i].id.clone(),
            alpha: model.alphas[i],
            representation: representations[i].clone(),
        })
        .collect();
    if members.is_empty() {
        return Err(SvmError::NoImportantSamples);
    }
    members.sort_by(|a, b| b.alpha.total_cmp(&a.alpha).then(a.index.cmp(&b.index)));
    Ok(ImportantSampleSet { members })
}
