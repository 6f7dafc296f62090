//! Plain softmax cross-entropy classifier with the scorer's trunk, used as a
//! reference point for the diffusion classifier.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::rng::child;
use crate::score::{Network, NetworkConfig, PROB_FLOOR};
use crate::train::{OptimizerState, TrainConfig};
use crate::transition::ClassDistribution;

#[derive(Debug, Clone)]
pub struct BaselineClassifier {
    net: Network,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

impl BaselineClassifier {
    /// Same width, depth and normalisation as the scorer built from `cfg.scorer`,
    /// without label/time conditioning.
    pub fn new(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        let s = cfg.scorer;
        let net = Network::new(
            NetworkConfig {
                input_dim,
                num_classes,
                embed_dim: s.embed_dim,
                hidden: s.hidden,
                blocks: s.blocks,
                groups: s.groups,
                conditioned: false,
            },
            &mut child(cfg.seed, 0),
        )?;
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    fn features(&self, batch: &[&[f64]]) -> Result<Array2<f64>> {
        let dim = self.net.config().input_dim;
        let mut flat = Vec::with_capacity(batch.len() * dim);
        for y in batch {
            if y.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: y.len(),
                });
            }
            flat.extend_from_slice(y);
        }
        Ok(Array2::from_shape_vec((batch.len(), dim), flat).expect("sized above"))
    }

    /// Mean cross-entropy of one batch and one optimiser step.
    fn step(
        &mut self,
        opt: &mut OptimizerState,
        batch: &[&Example],
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<f64> {
        let inputs: Vec<&[f64]> = batch.iter().map(|e| e.features.as_slice()).collect();
        let x = self.features(&inputs)?;
        let cache = self.net.forward(x.view(), None)?;
        let n = batch.len() as f64;
        let mut dlogits = Array2::zeros(cache.logits().dim());
        let mut loss = 0.0;
        for (row, ex) in batch.iter().enumerate() {
            let p = softmax(cache.logits().row(row).as_slice().expect("row-major"));
            loss -= p[ex.label].max(PROB_FLOOR).ln() / n;
            for (k, d) in dlogits.row_mut(row).iter_mut().enumerate() {
                *d = (p[k] - f64::from(u8::from(k == ex.label))) / n;
            }
        }
        let mut grad = self.net.zero_grad();
        self.net.backward(&cache, dlogits.view(), &mut grad)?;
        opt.apply_with_rate(self.net.params_mut(), &mut grad, cfg, lr)?;
        Ok(loss)
    }

    /// Trains with the same optimiser, batch size, epochs and learning-rate
    /// schedule as the scorer. Returns per-epoch mean loss.
    pub fn fit(&mut self, cfg: &TrainConfig, train: &[Example]) -> Result<Vec<f64>> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let mut opt = OptimizerState::new(self.net.num_params());
        let mut rng = child(cfg.seed, 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
        let mut global = 0usize;
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut steps = 0;
            for idx in order.chunks(cfg.batch_size) {
                let lr = cfg.learning_rate_at(global, total_steps);
                global += 1;
                let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
                sum += self.step(&mut opt, &batch, cfg, lr)?;
                steps += 1;
            }
            losses.push(sum / steps as f64);
        }
        self.net.snap_to_f32();
        Ok(losses)
    }

    pub fn predict_batch(&self, inputs: &[&[f64]]) -> Result<Vec<ClassDistribution>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let cache = self.net.forward(self.features(inputs)?.view(), None)?;
        cache
            .logits()
            .rows()
            .into_iter()
            .map(|z| ClassDistribution::new(softmax(z.as_slice().expect("row-major"))))
            .collect()
    }
}
