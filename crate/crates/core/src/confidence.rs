//! Gaussian motion likelihoods and the confidence weight used by the motion
//! energy.
//!
//! The per-node loss is `log σᵢ + ‖yᵢ − μᵢ‖² / σᵢ²`, averaged over nodes. It
//! differs from the exact negative log-likelihood only by a positive scale and
//! an additive constant, so both share minimizers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Motion3;
use crate::motion::GaussianMotion;

/// Weight of the temporal-encoder loss in the total loss.
pub const TEMPORAL_WEIGHT: f64 = 0.1;
/// Lower bound applied to predicted standard deviations (in the prediction's
/// own unit).
pub const SIGMA_TRUNCATION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfidenceError {
    #[error("sigma must be positive (node {node}, sigma {sigma})")]
    NonpositiveSigma { node: usize, sigma: f64 },
    #[error("{predictions} predictions for {targets} targets")]
    CountMismatch { predictions: usize, targets: usize },
    #[error("empty input")]
    Empty,
    #[error("invalid weight parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_mu: Vec<Motion3>,
    pub grad_sigma: Vec<f64>,
}

/// Simplified Gaussian NLL with analytic gradients.
pub fn nll_loss(pred: &[GaussianMotion], gt: &[Motion3]) -> Result<LossValue, ConfidenceError> {
    if pred.len() != gt.len() {
        return Err(ConfidenceError::CountMismatch {
            predictions: pred.len(),
            targets: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(ConfidenceError::Empty);
    }
    if let Some((node, g)) = pred
        .iter()
        .enumerate()
        .find(|(_, g)| !(g.sigma > 0.0) || !g.sigma.is_finite())
    {
        return Err(ConfidenceError::NonpositiveSigma {
            node,
            sigma: g.sigma,
        });
    }
    let inv_n = 1.0 / pred.len() as f64;
    let mut value = 0.0;
    let mut grad_mu = Vec::with_capacity(pred.len());
    let mut grad_sigma = Vec::with_capacity(pred.len());
    for (p, y) in pred.iter().zip(gt) {
        let diff = p.mu - y;
        let r2 = diff.norm_squared();
        let s2 = p.sigma * p.sigma;
        value += p.sigma.ln() + r2 / s2;
        grad_mu.push(diff * (2.0 * inv_n / s2));
        grad_sigma.push(inv_n * (1.0 / p.sigma - 2.0 * r2 / (s2 * p.sigma)));
    }
    Ok(LossValue {
        value: value * inv_n,
        grad_mu,
        grad_sigma,
    })
}

/// Loss over both the final and the temporal-encoder predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    /// Loss of the final predictions and its gradients.
    pub out: LossValue,
    /// Loss of the temporal predictions with gradients already scaled by
    /// [`TEMPORAL_WEIGHT`]; `temporal.value` is unscaled.
    pub temporal: LossValue,
}

pub fn total_loss(
    out_pred: &[GaussianMotion],
    temporal_pred: &[GaussianMotion],
    gt: &[Motion3],
) -> Result<TotalLoss, ConfidenceError> {
    let out = nll_loss(out_pred, gt)?;
    let mut temporal = nll_loss(temporal_pred, gt)?;
    for g in temporal.grad_mu.iter_mut() {
        *g *= TEMPORAL_WEIGHT;
    }
    for g in temporal.grad_sigma.iter_mut() {
        *g *= TEMPORAL_WEIGHT;
    }
    Ok(TotalLoss {
        value: out.value + TEMPORAL_WEIGHT * temporal.value,
        out,
        temporal,
    })
}

#[inline]
pub fn truncate_sigma(sigma: f64, sigma_min: f64) -> f64 {
    sigma.max(sigma_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightParams {
    pub k: f64,
    /// Meters.
    pub epsilon: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            k: 4.0,
            epsilon: 0.01,
        }
    }
}

impl WeightParams {
    pub fn new(k: f64, epsilon: f64) -> Result<Self, ConfidenceError> {
        let p = Self { k, epsilon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConfidenceError> {
        if !(self.k > 0.0) || !(self.epsilon > 0.0) {
            return Err(ConfidenceError::InvalidParams(
                "k and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `w = exp(−k σ² / (‖μ‖ + ε)²)`.
#[inline]
pub fn motion_weight(g: &GaussianMotion, params: &WeightParams) -> f64 {
    let denom = g.mu.norm() + params.epsilon;
    (-params.k * g.sigma * g.sigma / (denom * denom)).exp()
}
