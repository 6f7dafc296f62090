//! Score-entropy objective between true and predicted concrete scores.
//!
//! Per class `i`: `ŝ_i - s_i ln ŝ_i + s_i (ln s_i - 1)`, weighted by `σ_t / K`.
//! The constant `s_i (ln s_i - 1)` term is kept so the loss is exactly zero at
//! `ŝ = s`.

use crate::error::{check_len, Error, Result};
use crate::score::{ScoreColumn, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_class: Vec<f64>,
    pub sigma_t: f64,
    pub anchor: usize,
    /// Number of logarithm arguments raised to [`PROB_FLOOR`].
    pub floored: usize,
}

fn check_pair(s_true: &ScoreColumn, s_pred: &ScoreColumn, sigma_t: f64) -> Result<()> {
    check_len(s_true.num_classes(), s_pred.num_classes())?;
    if s_true.anchor() != s_pred.anchor() {
        return Err(Error::Invalid(format!(
            "anchor mismatch: true column anchored at {}, predicted at {}",
            s_true.anchor(),
            s_pred.anchor()
        )));
    }
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(Error::Invalid(format!(
            "noise rate must be >= 0, got {sigma_t}"
        )));
    }
    Ok(())
}

fn floored_ln(v: f64, floored: &mut usize) -> f64 {
    if v < PROB_FLOOR {
        *floored += 1;
        PROB_FLOOR.ln()
    } else {
        v.ln()
    }
}

pub fn didicm_loss(
    s_true: &ScoreColumn,
    s_pred: &ScoreColumn,
    sigma_t: f64,
) -> Result<LossBreakdown> {
    check_pair(s_true, s_pred, sigma_t)?;
    let mut floored = 0;
    let per_class: Vec<f64> = s_true
        .values()
        .iter()
        .zip(s_pred.values())
        .map(|(&s, &p)| {
            let v = (p - s) - s * (floored_ln(p, &mut floored) - floored_ln(s, &mut floored));
            // rounding can leave tiny negatives near p == s
            v.max(0.0)
        })
        .collect();
    let k = per_class.len() as f64;
    let total = sigma_t / k * per_class.iter().sum::<f64>();
    Ok(LossBreakdown {
        total,
        per_class,
        sigma_t,
        anchor: s_true.anchor(),
        floored,
    })
}

/// `∂L/∂ŝ_i = (σ_t / K)(1 - s_i / ŝ_i)`.
pub fn didicm_loss_grad(
    s_true: &ScoreColumn,
    s_pred: &ScoreColumn,
    sigma_t: f64,
) -> Result<Vec<f64>> {
    check_pair(s_true, s_pred, sigma_t)?;
    let w = sigma_t / s_true.num_classes() as f64;
    Ok(s_true
        .values()
        .iter()
        .zip(s_pred.values())
        .map(|(&s, &p)| w * (1.0 - s / p))
        .collect())
}

/// Gradient with respect to logits `z` where `ŝ_i = exp(z_i - z_j)`:
/// `∂L/∂z_k = (σ_t/K)[(ŝ_k - s_k) - δ_jk Σ_i (ŝ_i - s_i)]`.
pub fn didicm_logit_grad(
    s_true: &ScoreColumn,
    s_pred: &ScoreColumn,
    sigma_t: f64,
) -> Result<Vec<f64>> {
    check_pair(s_true, s_pred, sigma_t)?;
    let w = sigma_t / s_true.num_classes() as f64;
    let mut grad: Vec<f64> = s_true
        .values()
        .iter()
        .zip(s_pred.values())
        .map(|(&s, &p)| w * (p - s))
        .collect();
    let sum: f64 = grad.iter().sum();
    grad[s_true.anchor()] -= sum;
    Ok(grad)
}
