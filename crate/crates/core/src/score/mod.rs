//! Concrete scores: anchored probability ratios and the models that predict them.

mod checkpoint;
mod mlp;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{MlpScorer, MlpScorerConfig, TimeInput};
pub use network::{Network, NetworkCache, NetworkConfig, TensorSpec};

use ndarray::Array2;

use crate::data::{CorruptionSpec, MixtureTask};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::transition::{forward_marginal, ClassDistribution};

/// Floor applied to probabilities before ratios and logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Ratios `q_i / q_anchor`; strictly positive with the anchor entry exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreColumn {
    values: Vec<f64>,
    anchor: usize,
}

impl ScoreColumn {
    pub fn new(values: Vec<f64>, anchor: usize) -> Result<Self> {
        if anchor >= values.len() {
            return Err(Error::Invalid(format!(
                "anchor {anchor} out of range for {} classes",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Numerical(format!(
                "score entries must be positive and finite, got {v}"
            )));
        }
        if values[anchor] != 1.0 {
            return Err(Error::Invalid(format!(
                "anchor entry must be exactly 1, got {}",
                values[anchor]
            )));
        }
        Ok(Self { values, anchor })
    }

    /// Builds a column from real logits as `exp(z_i - z_anchor)`.
    pub fn from_logits(logits: &[f64], anchor: usize) -> Result<Self> {
        if anchor >= logits.len() {
            return Err(Error::Invalid(format!("anchor {anchor} out of range")));
        }
        if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
            return Err(Error::Numerical(format!("non-finite logit {z}")));
        }
        let za = logits[anchor];
        let values = logits.iter().map(|z| (z - za).exp()).collect();
        Self::new(values, anchor)
    }

    pub fn all_ones(k: usize, anchor: usize) -> Self {
        Self {
            values: vec![1.0; k],
            anchor,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }
}

/// Column `j` of the exact score matrix: `q / q[j]`.
pub fn exact_score_column(q: &ClassDistribution, anchor: usize) -> Result<ScoreColumn> {
    let probs = q.probs();
    if anchor >= probs.len() {
        return Err(Error::Invalid(format!("anchor {anchor} out of range")));
    }
    let denom = probs[anchor].max(PROB_FLOOR);
    let values = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i == anchor {
                1.0
            } else {
                p.max(PROB_FLOOR) / denom
            }
        })
        .collect();
    ScoreColumn::new(values, anchor)
}

/// The rank-one score matrix `q (1/q)^T`; entry `[i, j]` is `q_i / q_j`.
pub fn score_matrix_rank_one(q: &ClassDistribution) -> Array2<f64> {
    let floored: Vec<f64> = q.probs().iter().map(|p| p.max(PROB_FLOOR)).collect();
    let k = floored.len();
    Array2::from_shape_fn(
        (k, k),
        |(i, j)| {
            if i == j {
                1.0
            } else {
                floored[i] / floored[j]
            }
        },
    )
}

/// Normalises a score column into the distribution it implies.
pub fn normalize_scores(s: &ScoreColumn) -> Result<ClassDistribution> {
    ClassDistribution::from_weights(s.values())
}

/// One scorer query; `label` is the noisy label the column is anchored at.
#[derive(Debug, Clone, Copy)]
pub struct ScoreQuery<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub t: f64,
}

/// Anything that predicts a score column from `(y, noisy label, t)`.
pub trait Scorer {
    fn num_classes(&self) -> usize;

    fn score(&self, features: &[f64], label: usize, t: f64) -> Result<ScoreColumn>;

    fn score_batch(&self, queries: &[ScoreQuery<'_>]) -> Result<Vec<ScoreColumn>> {
        queries
            .iter()
            .map(|q| self.score(q.features, q.label, q.t))
            .collect()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn score(&self, features: &[f64], label: usize, t: f64) -> Result<ScoreColumn> {
        (**self).score(features, label, t)
    }
    fn score_batch(&self, queries: &[ScoreQuery<'_>]) -> Result<Vec<ScoreColumn>> {
        (**self).score_batch(queries)
    }
}

/// Scores computed from the task's true posterior pushed through the forward process.
#[derive(Debug, Clone)]
pub struct ExactScorer {
    task: MixtureTask,
    corruption: CorruptionSpec,
    schedule: NoiseSchedule,
}

impl ExactScorer {
    pub fn new(task: MixtureTask, corruption: CorruptionSpec, schedule: NoiseSchedule) -> Self {
        Self {
            task,
            corruption,
            schedule,
        }
    }

    /// The noisy marginal `q(c_t | y)` this scorer reads its columns from.
    pub fn marginal(&self, features: &[f64], t: f64) -> Result<ClassDistribution> {
        let q0 = self.task.true_posterior(features, &self.corruption)?;
        forward_marginal(&q0, self.schedule.sigma_bar(t)?)
    }
}

impl Scorer for ExactScorer {
    fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    fn score(&self, features: &[f64], label: usize, t: f64) -> Result<ScoreColumn> {
        exact_score_column(&self.marginal(features, t)?, label)
    }
}

/// Returns the all-ones column regardless of input: a scorer with no information.
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer {
    pub k: usize,
}

impl Scorer for UniformScorer {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn score(&self, _features: &[f64], label: usize, _t: f64) -> Result<ScoreColumn> {
        if label >= self.k {
            return Err(Error::Invalid(format!("label {label} out of range")));
        }
        Ok(ScoreColumn::all_ones(self.k, label))
    }
}
