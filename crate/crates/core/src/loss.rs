//! Training objective: cross-entropy `E`, reconstruction `R`, and the two
//! prototype regularizers `R1` (each prototype near some encoded input)
//! and `R2` (each encoded input near some prototype), combined as
//! `L = E + λ·R + λ1·R1 + λ2·R2`.
//!
//! The minima inside `R1`/`R2` range over the current minibatch. At ties
//! the lowest index is the argmin and receives the whole subgradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ForwardTrace, HeadMode, ModelConfig, ModelError, NetworkParams, Upstream};
use crate::tensor::{self, ShapeError, Tensor};

/// Lower clip applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("{0} needs at least one row")]
    EmptyBatch(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// λ, weight of the reconstruction term.
    pub lambda_r: f64,
    /// λ1, weight of R1.
    pub lambda_1: f64,
    /// λ2, weight of R2.
    pub lambda_2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub optimizer: Optimizer,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_r: 0.05,
            lambda_1: 0.05,
            lambda_2: 0.05,
            learning_rate: 1e-4,
            batch_size: 250,
            epochs: 1500,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda", self.lambda_r),
            ("lambda1", self.lambda_1),
            ("lambda2", self.lambda_2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        Ok(())
    }
}

/// Per-batch values of every term.
///
/// `R1`/`R2` are measured whenever the model has a prototype layer and
/// `R` whenever it has a decoder, even if the weight is zero; a term only
/// enters `total` (and the gradient) when its weight is positive.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub reconstruction: f64,
    pub proto_to_data: f64,
    pub data_to_proto: f64,
    pub total: f64,
    pub lambda_r: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
}

pub const STEP_CSV_HEADER: &str = "step,E,R,R1,R2,L";

impl LossBreakdown {
    fn assemble(e: f64, r: f64, r1: f64, r2: f64, lambda_r: f64, lambda_1: f64, lambda_2: f64) -> Self {
        Self {
            cross_entropy: e,
            reconstruction: r,
            proto_to_data: r1,
            data_to_proto: r2,
            total: e + lambda_r * r + lambda_1 * r1 + lambda_2 * r2,
            lambda_r,
            lambda_1,
            lambda_2,
        }
    }

    /// Names of the terms contributing to `total`.
    pub fn active_terms(&self) -> Vec<&'static str> {
        let mut terms = vec!["E"];
        for (name, w) in [("R", self.lambda_r), ("R1", self.lambda_1), ("R2", self.lambda_2)] {
            if w > 0.0 {
                terms.push(name);
            }
        }
        terms
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.cross_entropy, self.reconstruction, self.proto_to_data, self.data_to_proto, self.total
        )
    }

    /// Weighted mean of several breakdowns (weights are batch sizes).
    pub fn weighted_mean(items: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = items.iter().map(|(_, w)| w).sum();
        let Some((first, _)) = items.first() else {
            return LossBreakdown::default();
        };
        let mean = |f: fn(&LossBreakdown) -> f64| items.iter().map(|(b, w)| f(b) * *w as f64).sum::<f64>() / n as f64;
        LossBreakdown::assemble(
            mean(|b| b.cross_entropy),
            mean(|b| b.reconstruction),
            mean(|b| b.proto_to_data),
            mean(|b| b.data_to_proto),
            first.lambda_r,
            first.lambda_1,
            first.lambda_2,
        )
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(ShapeError::Dim {
            op: "cross_entropy",
            dim: "label count",
            expected: rows,
            actual: labels.len(),
        }
        .into());
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange { row, label, classes });
    }
    Ok(())
}

/// Mean over rows of `-ln(max(p[true], 1e-12))`.
pub fn cross_entropy(probabilities: &Tensor, labels: &[usize]) -> Result<f64, LossError> {
    let (b, k) = (probabilities.dim(0), probabilities.dim(1));
    if b == 0 {
        return Err(LossError::EmptyBatch("cross_entropy"));
    }
    check_labels(labels, b, k)?;
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probabilities.data()[i * k + y].max(PROB_FLOOR).ln())
        .sum();
    Ok(sum / b as f64)
}

/// Gradient of [`cross_entropy`] w.r.t. the logits feeding the softmax.
pub fn cross_entropy_logit_grad(probabilities: &Tensor, labels: &[usize]) -> Tensor {
    let (b, k) = (probabilities.dim(0), probabilities.dim(1));
    let mut g = Tensor::zeros(probabilities.shape());
    for (i, &y) in labels.iter().enumerate() {
        let p = &probabilities.data()[i * k..(i + 1) * k];
        if p[y] < PROB_FLOOR {
            // clipped: the loss is locally constant
            continue;
        }
        let row = g.row_mut(i);
        for (c, (r, &pc)) in row.iter_mut().zip(p).enumerate() {
            *r = (pc - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    g
}

/// Mean over examples of the summed squared pixel error.
pub fn reconstruction_loss(original: &Tensor, reconstructed: &Tensor) -> Result<f64, LossError> {
    if original.shape() != reconstructed.shape() {
        return Err(ShapeError::Dim {
            op: "reconstruction_loss",
            dim: "element count",
            expected: original.len(),
            actual: reconstructed.len(),
        }
        .into());
    }
    let b = original.dim(0);
    if b == 0 {
        return Err(LossError::EmptyBatch("reconstruction_loss"));
    }
    let sum: f64 = original
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(x, r)| (r - x) * (r - x))
        .sum();
    Ok(sum / b as f64)
}

pub fn reconstruction_grad(original: &Tensor, reconstructed: &Tensor) -> Tensor {
    let b = original.dim(0) as f64;
    Tensor::new(
        original.shape().to_vec(),
        original
            .data()
            .iter()
            .zip(reconstructed.data())
            .map(|(x, r)| 2.0 * (r - x) / b)
            .collect(),
    )
    .expect("same shape")
}

/// For each column of `d: [n, m]`, the lowest-index row attaining the min.
fn column_argmin(d: &Tensor) -> Vec<usize> {
    let (n, m) = (d.dim(0), d.dim(1));
    (0..m)
        .map(|j| {
            let mut best = 0;
            for i in 1..n {
                if d.data()[i * m + j] < d.data()[best * m + j] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// For each row of `d: [n, m]`, the lowest-index column attaining the min.
fn row_argmin(d: &Tensor) -> Vec<usize> {
    let m = d.dim(1);
    d.data()
        .chunks_exact(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `R1` from a distance table `d[i, j] = ||z_i - p_j||²`, with its gradient
/// w.r.t. `d`.
pub fn r1_from_distances(d: &Tensor) -> Result<(f64, Tensor), LossError> {
    let (n, m) = (d.dim(0), d.dim(1));
    if n == 0 {
        return Err(LossError::EmptyBatch("r1"));
    }
    let mut grad = Tensor::zeros(d.shape());
    let mut sum = 0.0;
    for (j, i) in column_argmin(d).into_iter().enumerate() {
        sum += d.data()[i * m + j];
        grad.data_mut()[i * m + j] = 1.0 / m as f64;
    }
    Ok((sum / m as f64, grad))
}

/// `R2` from a distance table, with its gradient w.r.t. the table.
pub fn r2_from_distances(d: &Tensor) -> Result<(f64, Tensor), LossError> {
    let (n, m) = (d.dim(0), d.dim(1));
    if n == 0 {
        return Err(LossError::EmptyBatch("r2"));
    }
    let mut grad = Tensor::zeros(d.shape());
    let mut sum = 0.0;
    for (i, j) in row_argmin(d).into_iter().enumerate() {
        sum += d.data()[i * m + j];
        grad.data_mut()[i * m + j] = 1.0 / n as f64;
    }
    Ok((sum / n as f64, grad))
}

/// `(1/m) Σ_j min_i ||p_j - z_i||²`
pub fn r1(prototypes: &Tensor, z: &Tensor) -> Result<f64, LossError> {
    Ok(r1_from_distances(&tensor::pairwise_sq_dist(z, prototypes)?)?.0)
}

/// `(1/b) Σ_i min_j ||z_i - p_j||²`
pub fn r2(prototypes: &Tensor, z: &Tensor) -> Result<f64, LossError> {
    Ok(r2_from_distances(&tensor::pairwise_sq_dist(z, prototypes)?)?.0)
}

/// Gradients `(dP, dZ)` of `R1`.
pub fn r1_grad(prototypes: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor), LossError> {
    let d = tensor::pairwise_sq_dist(z, prototypes)?;
    let (_, g) = r1_from_distances(&d)?;
    let (dz, dp) = tensor::pairwise_sq_dist_backward(z, prototypes, &g);
    Ok((dp, dz))
}

/// Gradients `(dP, dZ)` of `R2`.
pub fn r2_grad(prototypes: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor), LossError> {
    let d = tensor::pairwise_sq_dist(z, prototypes)?;
    let (_, g) = r2_from_distances(&d)?;
    let (dz, dp) = tensor::pairwise_sq_dist_backward(z, prototypes, &g);
    Ok((dp, dz))
}

/// Itemized objective for one batch.
pub fn total_loss(
    trace: &ForwardTrace,
    batch: &Tensor,
    labels: &[usize],
    prototypes: &Tensor,
    hyper: &Hyperparams,
    autoencoder_enabled: bool,
) -> Result<LossBreakdown, LossError> {
    Ok(evaluate_terms(
        trace,
        batch,
        labels,
        prototypes,
        hyper,
        autoencoder_enabled,
        HeadMode::Prototype,
    )?
    .0)
}

struct TermGrads {
    distances: Option<Tensor>,
    reconstruction: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_terms(
    trace: &ForwardTrace,
    batch: &Tensor,
    labels: &[usize],
    prototypes: &Tensor,
    hyper: &Hyperparams,
    autoencoder_enabled: bool,
    head: HeadMode,
) -> Result<(LossBreakdown, TermGrads), LossError> {
    let e = cross_entropy(&trace.probabilities, labels)?;

    let (r, d_rec) = match (&trace.reconstruction, autoencoder_enabled) {
        (Some(rec), true) => {
            let r = reconstruction_loss(batch, rec)?;
            let g = (hyper.lambda_r > 0.0).then(|| {
                let mut g = reconstruction_grad(batch, rec);
                g.scale(hyper.lambda_r);
                g
            });
            (r, g)
        }
        _ => (0.0, None),
    };
    let lambda_r = if autoencoder_enabled { hyper.lambda_r } else { 0.0 };

    let (r1v, r2v, d_dist, lambda_1, lambda_2) = match head {
        HeadMode::Prototype => {
            let d = tensor::pairwise_sq_dist(&trace.z, prototypes)?;
            let (r1v, g1) = r1_from_distances(&d)?;
            let (r2v, g2) = r2_from_distances(&d)?;
            let mut g = Tensor::zeros(d.shape());
            let mut any = false;
            if hyper.lambda_1 > 0.0 {
                g.add_scaled(&g1, hyper.lambda_1);
                any = true;
            }
            if hyper.lambda_2 > 0.0 {
                g.add_scaled(&g2, hyper.lambda_2);
                any = true;
            }
            (r1v, r2v, any.then_some(g), hyper.lambda_1, hyper.lambda_2)
        }
        HeadMode::DenseAblation => (0.0, 0.0, None, 0.0, 0.0),
    };

    let breakdown = LossBreakdown::assemble(e, r, r1v, r2v, lambda_r, lambda_1, lambda_2);
    Ok((
        breakdown,
        TermGrads {
            distances: d_dist,
            reconstruction: d_rec,
        },
    ))
}

/// Forward pass, itemized loss and the gradient of `L` w.r.t. every
/// parameter, in one call.
pub fn loss_and_grad(
    params: &NetworkParams,
    cfg: &ModelConfig,
    batch: &Tensor,
    labels: &[usize],
    hyper: &Hyperparams,
) -> Result<(LossBreakdown, NetworkParams, ForwardTrace), LossError> {
    let trace = model::forward(params, cfg, batch)?;
    let (breakdown, terms) = evaluate_terms(
        &trace,
        batch,
        labels,
        &params.prototypes,
        hyper,
        cfg.autoencoder_enabled,
        cfg.head_mode,
    )?;
    let upstream = Upstream {
        logits: cross_entropy_logit_grad(&trace.probabilities, labels),
        distances: terms.distances,
        reconstruction: terms.reconstruction,
    };
    let grads = model::backward(params, cfg, &trace, &upstream)?;
    Ok((breakdown, grads, trace))
}

/// Itemized loss without gradients.
pub fn loss_only(
    params: &NetworkParams,
    cfg: &ModelConfig,
    batch: &Tensor,
    labels: &[usize],
    hyper: &Hyperparams,
) -> Result<LossBreakdown, LossError> {
    let trace = model::forward(params, cfg, batch)?;
    Ok(evaluate_terms(
        &trace,
        batch,
        labels,
        &params.prototypes,
        hyper,
        cfg.autoencoder_enabled,
        cfg.head_mode,
    )?
    .0)
}
