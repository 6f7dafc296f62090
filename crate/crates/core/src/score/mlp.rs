use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use super::network::{stack_rows, Network, NetworkCache, NetworkConfig};
use super::{ScoreColumn, ScoreQuery, Scorer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;

/// What the time embedding is fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeInput {
    /// `sigma_bar(t) / sigma_bar_max`.
    #[default]
    TotalNoise,
    /// `t` itself.
    Raw,
}

impl fmt::Display for TimeInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeInput::TotalNoise => "total-noise",
            TimeInput::Raw => "raw",
        })
    }
}

impl FromStr for TimeInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total-noise" => Ok(TimeInput::TotalNoise),
            "raw" => Ok(TimeInput::Raw),
            other => Err(Error::Invalid(format!("unknown time input '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpScorerConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub groups: usize,
    pub time_input: TimeInput,
}

impl Default for MlpScorerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 128,
            blocks: 3,
            groups: 8,
            time_input: TimeInput::TotalNoise,
        }
    }
}

/// Trainable scorer: a conditioned residual MLP whose logits `z` give the
/// column `exp(z_i - z_j)` for noisy label `j`.
#[derive(Debug, Clone)]
pub struct MlpScorer {
    net: Network,
    schedule: NoiseSchedule,
    time_input: TimeInput,
}

impl MlpScorer {
    pub fn new(
        config: MlpScorerConfig,
        input_dim: usize,
        num_classes: usize,
        schedule: NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let net = Network::new(
            NetworkConfig {
                input_dim,
                num_classes,
                embed_dim: config.embed_dim,
                hidden: config.hidden,
                blocks: config.blocks,
                groups: config.groups,
                conditioned: true,
            },
            rng,
        )?;
        Ok(Self {
            net,
            schedule,
            time_input: config.time_input,
        })
    }

    pub(crate) fn from_parts(
        net: Network,
        schedule: NoiseSchedule,
        time_input: TimeInput,
    ) -> Result<Self> {
        if !net.config().conditioned {
            return Err(Error::Invalid("scorer network must be conditioned".into()));
        }
        Ok(Self {
            net,
            schedule,
            time_input,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn time_input(&self) -> TimeInput {
        self.time_input
    }

    pub fn input_dim(&self) -> usize {
        self.net.config().input_dim
    }

    fn tau(&self, t: f64) -> Result<f64> {
        match self.time_input {
            TimeInput::TotalNoise => self.schedule.normalized_total_noise(t),
            TimeInput::Raw => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Domain(format!("time {t} outside [0, 1]")));
                }
                Ok(t)
            }
        }
    }

    /// Raw logits for a batch, keeping the activations for backpropagation.
    pub fn forward(
        &self,
        features: ArrayView2<'_, f64>,
        labels: &[usize],
        times: &[f64],
    ) -> Result<NetworkCache> {
        let taus = times
            .iter()
            .map(|&t| self.tau(t))
            .collect::<Result<Vec<_>>>()?;
        self.net.forward(features, Some((labels, &taus)))
    }

    pub fn forward_queries(&self, queries: &[ScoreQuery<'_>]) -> Result<NetworkCache> {
        let x: Array2<f64> = stack_rows(queries.iter().map(|q| q.features), self.input_dim())?;
        let labels: Vec<usize> = queries.iter().map(|q| q.label).collect();
        let times: Vec<f64> = queries.iter().map(|q| q.t).collect();
        self.forward(x.view(), &labels, &times)
    }
}

impl Scorer for MlpScorer {
    fn num_classes(&self) -> usize {
        self.net.config().num_classes
    }

    fn score(&self, features: &[f64], label: usize, t: f64) -> Result<ScoreColumn> {
        let mut out = self.score_batch(&[ScoreQuery { features, label, t }])?;
        Ok(out.pop().expect("one query"))
    }

    fn score_batch(&self, queries: &[ScoreQuery<'_>]) -> Result<Vec<ScoreColumn>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let cache = self.forward_queries(queries)?;
        cache
            .logits()
            .rows()
            .into_iter()
            .zip(queries)
            .map(|(z, q)| {
                ScoreColumn::from_logits(z.as_slice().expect("row-major logits"), q.label)
            })
            .collect()
    }
}
