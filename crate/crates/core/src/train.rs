//! Stochastic training of [`MlpScorer`] on the score-entropy objective.
//!
//! Each example contributes one noisy draw: `t ~ U[0, 1]`, `q_t` from the
//! forward marginal of its (usually one-hot) label distribution, an anchor
//! `j ~ q_t`, and target column `q_t / q_t[j]`. Gradients are averaged over the
//! batch and applied with bias-corrected Adam after global-norm clipping.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{CorruptionSpec, Example, MixtureTask};
use crate::error::{check_len, Error, Result};
use crate::loss::{didicm_logit_grad, didicm_loss};
use crate::rng::{child, Rng};
use crate::sampler::{didicm_cp_batch, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::score::{exact_score_column, MlpScorer, MlpScorerConfig, ScoreColumn, ScoreQuery};
use crate::transition::{forward_marginal, sample_noisy_label, ClassDistribution};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub scorer: MlpScorerConfig,
    /// Draw `t` from one stratum of `[0, 1]` per batch slot instead of i.i.d.
    pub stratified_t: bool,
    /// Sampler used for the per-epoch held-out metrics.
    pub eval_sampler: SamplerConfig,
    /// Anneal the learning rate to zero along a half cosine over the run.
    pub cosine_decay: bool,
    /// Record real wall-clock time in the metrics; off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            schedule: NoiseSchedule::default(),
            scorer: MlpScorerConfig::default(),
            stratified_t: false,
            eval_sampler: SamplerConfig::with_steps(8),
            cosine_decay: true,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("{what} out of range")));
        if self.epochs == 0 {
            return bad("epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam decay");
        }
        if !(self.epsilon > 0.0) || !(self.grad_clip > 0.0) {
            return bad("epsilon/grad_clip");
        }
        self.eval_sampler.validate()
    }

    /// Learning rate for optimiser step `step` of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if self.cosine_decay && total > 0 {
            0.5 * self.learning_rate
                * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Adam moment estimates, one slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    /// Clips `grad` to the configured global norm and applies one update.
    /// Returns the norm before clipping.
    pub fn apply(
        &mut self,
        params: &mut [f64],
        grad: &mut [f64],
        cfg: &TrainConfig,
    ) -> Result<f64> {
        self.apply_with_rate(params, grad, cfg, cfg.learning_rate)
    }

    pub fn apply_with_rate(
        &mut self,
        params: &mut [f64],
        grad: &mut [f64],
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<f64> {
        check_len(self.m.len(), params.len())?;
        check_len(params.len(), grad.len())?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        if norm > cfg.grad_clip {
            let scale = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
        Ok(norm)
    }
}

/// One noisy training target.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTarget {
    pub t: f64,
    pub sigma_t: f64,
    pub q_t: ClassDistribution,
    pub anchor: usize,
    pub score: ScoreColumn,
}

/// Forward-noises `q0` to time `t`, draws the anchor and forms the target column.
pub fn noisy_target(
    q0: &ClassDistribution,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<NoisyTarget> {
    let q_t = forward_marginal(q0, schedule.sigma_bar(t)?)?;
    let anchor = sample_noisy_label(&q_t, rng);
    let score = exact_score_column(&q_t, anchor)?;
    Ok(NoisyTarget {
        t,
        sigma_t: schedule.sigma(t)?,
        q_t,
        anchor,
        score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Batch-mean loss.
    pub loss: f64,
    pub grad_norm: f64,
    pub floored: usize,
}

fn draw_times(n: usize, stratified: bool, rng: &mut Rng) -> Vec<f64> {
    if stratified {
        let mut t: Vec<f64> = (0..n)
            .map(|i| (i as f64 + rng.random::<f64>()) / n as f64)
            .collect();
        t.shuffle(rng);
        t
    } else {
        (0..n).map(|_| rng.random::<f64>()).collect()
    }
}

/// Batch-mean loss and its parameter gradient for explicit targets.
pub fn loss_and_grad(
    scorer: &MlpScorer,
    inputs: &[&[f64]],
    targets: &[NoisyTarget],
) -> Result<(StepReport, Vec<f64>)> {
    check_len(inputs.len(), targets.len())?;
    let queries: Vec<ScoreQuery<'_>> = inputs
        .iter()
        .zip(targets)
        .map(|(y, tg)| ScoreQuery {
            features: y,
            label: tg.anchor,
            t: tg.t,
        })
        .collect();
    let cache = scorer.forward_queries(&queries)?;
    let k = scorer.network().config().num_classes;
    let n = inputs.len() as f64;
    let mut dlogits = Array2::zeros((inputs.len(), k));
    let mut loss = 0.0;
    let mut floored = 0;
    for (row, tg) in targets.iter().enumerate() {
        let z = cache.logits().row(row);
        let pred = ScoreColumn::from_logits(z.as_slice().expect("row-major"), tg.anchor)?;
        let l = didicm_loss(&tg.score, &pred, tg.sigma_t)?;
        loss += l.total / n;
        floored += l.floored;
        let g = didicm_logit_grad(&tg.score, &pred, tg.sigma_t)?;
        for (d, gk) in dlogits.row_mut(row).iter_mut().zip(g) {
            *d = gk / n;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("batch loss is {loss}")));
    }
    let mut grad = scorer.network().zero_grad();
    scorer
        .network()
        .backward(&cache, dlogits.view(), &mut grad)?;
    Ok((
        StepReport {
            loss,
            grad_norm: 0.0,
            floored,
        },
        grad,
    ))
}

/// One optimiser step on a batch of soft label distributions.
pub fn train_step_soft(
    scorer: &mut MlpScorer,
    opt: &mut OptimizerState,
    inputs: &[&[f64]],
    q0: &[ClassDistribution],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<StepReport> {
    if inputs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    check_len(inputs.len(), q0.len())?;
    let times = draw_times(inputs.len(), cfg.stratified_t, rng);
    let targets = q0
        .iter()
        .zip(times)
        .map(|(q, t)| noisy_target(q, t, &cfg.schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    let (mut report, mut grad) = loss_and_grad(scorer, inputs, &targets)?;
    report.grad_norm =
        opt.apply_with_rate(scorer.network_mut().params_mut(), &mut grad, cfg, lr)?;
    Ok(report)
}

/// One optimiser step on labelled examples (one-hot `q0`).
pub fn train_step(
    scorer: &mut MlpScorer,
    opt: &mut OptimizerState,
    batch: &[Example],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepReport> {
    train_step_at(scorer, opt, batch, cfg, cfg.learning_rate, rng)
}

fn train_step_at(
    scorer: &mut MlpScorer,
    opt: &mut OptimizerState,
    batch: &[Example],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<StepReport> {
    let k = scorer.network().config().num_classes;
    if let Some(e) = batch.iter().find(|e| e.label >= k) {
        return Err(Error::Invalid(format!(
            "label {} out of range for {k} classes",
            e.label
        )));
    }
    let inputs: Vec<&[f64]> = batch.iter().map(|e| e.features.as_slice()).collect();
    let q0: Vec<ClassDistribution> = batch
        .iter()
        .map(|e| ClassDistribution::one_hot(k, e.label))
        .collect();
    train_step_soft(scorer, opt, &inputs, &q0, cfg, lr, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub tv: f64,
    pub top1: f64,
    pub wall_ms: u128,
}

pub struct FitOutcome {
    pub scorer: MlpScorer,
    pub metrics: Vec<EpochMetrics>,
}

/// Mean TV to the true posterior and top-1 accuracy of CP on `examples`.
pub fn held_out_metrics(
    scorer: &MlpScorer,
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    examples: &[Example],
    sampler: &SamplerConfig,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let inputs: Vec<&[f64]> = examples.iter().map(|e| e.features.as_slice()).collect();
    let mut tv = 0.0;
    let mut hits = 0usize;
    for (chunk, ex) in inputs.chunks(1024).zip(examples.chunks(1024)) {
        let est = didicm_cp_batch(chunk, scorer, scorer.schedule(), sampler)?;
        for (e, x) in est.iter().zip(ex) {
            tv += e
                .probs
                .total_variation(&task.true_posterior(&x.features, corruption)?);
            hits += usize::from(e.probs.argmax() == x.label);
        }
    }
    let n = examples.len() as f64;
    Ok((tv / n, hits as f64 / n))
}

/// Trains a fresh scorer. Parameters are rounded to `f32` at the end so the
/// returned model equals what a checkpoint round trip would give.
pub fn fit(
    cfg: &TrainConfig,
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    train: &[Example],
    held_out: &[Example],
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut scorer = MlpScorer::new(
        cfg.scorer,
        task.dim(),
        task.num_classes(),
        cfg.schedule,
        &mut child(cfg.seed, 0),
    )?;
    let mut opt = OptimizerState::new(scorer.network().num_params());
    let mut rng = child(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut last_good = scorer.clone();
    let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let mut global = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            let lr = cfg.learning_rate_at(global, total_steps);
            global += 1;
            match train_step_at(&mut scorer, &mut opt, &batch, cfg, lr, &mut rng) {
                Ok(r) => {
                    total += r.loss;
                    steps += 1;
                }
                Err(e) if e.is_numerical() => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: e.to_string(),
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let (tv, top1) = held_out_metrics(&scorer, task, corruption, held_out, &cfg.eval_sampler)?;
        metrics.push(EpochMetrics {
            epoch,
            loss: total / steps as f64,
            tv,
            top1,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_millis()
            } else {
                0
            },
        });
        last_good = scorer.clone();
    }
    scorer.network_mut().snap_to_f32();
    Ok(FitOutcome { scorer, metrics })
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,tv,top1,wall_ms\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.6},{}",
            m.epoch, m.loss, m.tv, m.top1, m.wall_ms
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}
