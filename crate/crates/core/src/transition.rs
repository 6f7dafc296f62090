//! Uniform transition-rate generator and the forward marginal.
//!
//! The generator is `R = 11^T - K I`, scaled by the noise rate. Its spectrum is
//! `{0, -K}` so `exp(sigma_bar R) q0 = e^{-K sigma_bar} q0 + (1 - e^{-K sigma_bar}) / K`,
//! which is what [`forward_marginal`] computes. Class labels are 0-based.

use ndarray::Array2;
use rand::Rng as _;

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

/// Drift from the simplex tolerated silently; renormalised away.
pub const SIMPLEX_SNAP: f64 = 1e-12;
/// Drift beyond this is a bug upstream and is reported.
pub const SIMPLEX_TOLERANCE: f64 = 1e-8;
/// Largest class count accepted by the series oracle.
pub const ORACLE_MAX_CLASSES: usize = 64;

/// A probability vector over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    /// Validates `probs` and snaps small floating-point drift back onto the simplex.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Invalid(format!(
                "a class distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite probability {bad}")));
        }
        if let Some(neg) = probs.iter().find(|&&p| p < -SIMPLEX_TOLERANCE) {
            return Err(Error::Numerical(format!("negative probability {neg:e}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Numerical(format!(
                "probabilities sum to {sum}, off the simplex by {:e}",
                sum - 1.0
            )));
        }
        let clamped = probs.iter().any(|&p| p < 0.0);
        if clamped || (sum - 1.0).abs() > SIMPLEX_SNAP {
            probs.iter_mut().for_each(|p| *p = p.max(0.0));
            let sum: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { probs })
    }

    /// Normalises non-negative weights with a positive total.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Numerical(format!(
                "cannot normalise weights with total {sum}"
            )));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 2, "need at least 2 classes");
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, label: usize) -> Self {
        assert!(k >= 2 && label < k, "label {label} out of range for K={k}");
        let mut probs = vec![0.0; k];
        probs[label] = 1.0;
        Self { probs }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Smallest entry; ties go to the lowest index.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p < self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn total_variation(&self, other: &ClassDistribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// The uniform rate matrix `11^T - K I` for `K` classes, never stored densely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformRate {
    k: usize,
}

impl UniformRate {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Invalid(format!("K must be at least 2, got {k}")));
        }
        Ok(Self { k })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Dense `sigma * R`; test and oracle use only.
    pub fn dense(&self, sigma: f64) -> Array2<f64> {
        let k = self.k;
        Array2::from_shape_fn((k, k), |(i, j)| {
            if i == j {
                sigma * (1.0 - k as f64)
            } else {
                sigma
            }
        })
    }
}

/// `sigma * R * q`, computed in O(K) as `sigma * (sum(q) 1 - K q)`.
pub fn apply_rate(sigma: f64, q: &[f64], rate: UniformRate) -> Result<Vec<f64>> {
    check_len(rate.k, q.len())?;
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!(
            "noise rate must be >= 0, got {sigma}"
        )));
    }
    let total: f64 = q.iter().sum();
    let k = rate.k as f64;
    Ok(q.iter().map(|&qi| sigma * (total - k * qi)).collect())
}

/// Closed-form forward marginal after total noise `sigma_bar`.
pub fn forward_marginal(q0: &ClassDistribution, sigma_bar: f64) -> Result<ClassDistribution> {
    if !(sigma_bar >= 0.0) {
        return Err(Error::Invalid(format!(
            "total noise must be >= 0, got {sigma_bar}"
        )));
    }
    let k = q0.num_classes() as f64;
    let keep = (-k * sigma_bar).exp();
    let spread = -(-k * sigma_bar).exp_m1() / k;
    ClassDistribution::new(q0.probs().iter().map(|&p| keep * p + spread).collect())
}

/// `exp(sigma_bar R)` by scaling and squaring a truncated Taylor series.
///
/// Oracle for tests; refuses `K > 64`.
pub fn matrix_exponential_oracle(k: usize, sigma_bar: f64) -> Result<Array2<f64>> {
    if k > ORACLE_MAX_CLASSES {
        return Err(Error::Invalid(format!(
            "series oracle is capped at K={ORACLE_MAX_CLASSES}, got {k}"
        )));
    }
    if !(sigma_bar >= 0.0 && sigma_bar.is_finite()) {
        return Err(Error::Invalid(format!(
            "total noise must be >= 0, got {sigma_bar}"
        )));
    }
    let a = UniformRate::new(k)?.dense(sigma_bar);
    // Infinity norm of sigma_bar R is 2 sigma_bar (K - 1).
    let norm = 2.0 * sigma_bar * (k as f64 - 1.0);
    let mut squarings = 0u32;
    while norm / 2f64.powi(squarings as i32) > 0.5 {
        squarings += 1;
    }
    let scaled = a / 2f64.powi(squarings as i32);

    let mut sum = Array2::<f64>::eye(k);
    let mut term = Array2::<f64>::eye(k);
    for n in 1..200 {
        term = term.dot(&scaled) / n as f64;
        sum += &term;
        let term_max = term.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if term_max <= 1e-16 * sum.iter().fold(0.0f64, |m, v| m.max(v.abs())) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    Ok(sum)
}

/// Draws a label from `q` by inverting its CDF.
pub fn sample_noisy_label(q: &ClassDistribution, rng: &mut Rng) -> usize {
    sample_categorical(q.probs(), rng)
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}
