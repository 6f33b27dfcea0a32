//! The composite training objective.
//!
//! Three terms shape the attention head:
//!
//! * **cross-entropy** — the masked input must still be classified as the
//!   conditioning class (faithfulness);
//! * **area** — `(1/(P·Q)) Σ s^λ4` with `λ4 < 1` pushes the mask towards
//!   covering little of the map (sparsity). The fractional power exaggerates
//!   small activations, so "many faint pixels" costs nearly as much as
//!   "few strong ones";
//! * **total variation** — the sum of squared neighbour differences
//!   penalises speckle and favours contiguous regions.
//!
//! The total is `λ1·TV + λ2·AV + λ3·CE`. Over a batch every term is the
//! mean of the per-sample values, so the objective's scale does not depend
//! on the batch size.
//!
//! The functions here are the plain (non-differentiated) single-map forms
//! used in reporting and tests. Training evaluates mathematically identical
//! tape ops (see [`crate::autodiff`]); unit tests pin the two paths to each
//! other.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, AV_CLAMP};
use crate::backbone::ClassScores;
use crate::error::{Error, Result};

/// Coefficients of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// λ1, weight of the total-variation term.
    pub lambda_tv: f64,
    /// λ2, weight of the area term.
    pub lambda_av: f64,
    /// λ3, weight of the cross-entropy term.
    pub lambda_ce: f64,
    /// λ4, the exponent inside the area term.
    pub av_exponent: f64,
}

impl Default for LossWeights {
    /// The reference defaults: λ1 = 0.01, λ2 = 2, λ3 = 1.5, λ4 = 0.3.
    fn default() -> Self {
        LossWeights {
            lambda_tv: 0.01,
            lambda_av: 2.0,
            lambda_ce: 1.5,
            av_exponent: 0.3,
        }
    }
}

impl LossWeights {
    /// A cross-entropy-only objective (λ1 = λ2 = 0), the ablation baseline.
    pub fn ce_only() -> Self {
        LossWeights {
            lambda_tv: 0.0,
            lambda_av: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_tv, self.lambda_av, self.lambda_ce, self.av_exponent]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.av_exponent == 0.0 {
            return Err(Error::InvalidConfig {
                detail: "loss weights must be finite and non-negative, av exponent positive".into(),
            });
        }
        Ok(())
    }
}

/// The values of the individual terms at one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tv: f64,
    pub av: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines raw term values under the given weights.
    pub fn compose(weights: &LossWeights, tv: f64, av: f64, ce: f64) -> Self {
        LossBreakdown {
            tv,
            av,
            ce,
            total: weights.lambda_tv * tv + weights.lambda_av * av + weights.lambda_ce * ce,
        }
    }
}

/// Area of one normalised map: `(1/(P·Q)) Σ s^exponent`, entries clamped to
/// at least `1e-6` inside the power. Negative entries are a contract
/// violation and an error.
pub fn av_loss(s: &Array2<f64>, exponent: f64) -> Result<f64> {
    if s.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument {
            context: "av_loss",
            detail: "saliency entries must be non-negative".into(),
        });
    }
    let n = s.len() as f64;
    Ok(s.iter().map(|&v| v.max(AV_CLAMP).powf(exponent)).sum::<f64>() / n)
}

/// Total variation of one map: squared neighbour differences, no wrap-around.
pub fn tv_loss(s: &Array2<f64>) -> f64 {
    kernels::total_variation(&s.view())
}

/// Cross-entropy of a score distribution against a target class:
/// `-ln p[target]`.
pub fn ce_loss(scores: &ClassScores, target: usize) -> Result<f64> {
    Ok(-scores.prob(target)?.ln())
}
