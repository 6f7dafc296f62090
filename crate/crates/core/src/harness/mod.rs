//! Evaluation, sweeps, ablations and the corruption x training-ratio study.
//!
//! Every table is emitted as long-format CSV with a header row and LF line
//! endings. Wall-clock columns are written as 0 unless timing is requested, so
//! that seeded runs produce byte-identical files.

mod baseline;

pub use baseline::BaselineClassifier;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::data::{CorruptionKind, CorruptionSpec, Example, MixtureTask};
use crate::error::{Error, Result};
use crate::rng::{child, child_seed};
use crate::sampler::{
    didicm_cl, didicm_cp_batch_from, reverse_full_naive, Method, PosteriorEstimate, SamplerConfig,
    Strategy,
};
use crate::schedule::NoiseSchedule;
use crate::score::{MlpScorerConfig, Scorer, TimeInput, PROB_FLOOR};
use crate::train::{fit, TrainConfig};
use crate::transition::ClassDistribution;

const CP_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub top1: f64,
    /// Only reported when there are more than five classes.
    pub top5: Option<f64>,
    pub mean_tv: f64,
    pub nll: f64,
    /// Scorer evaluations per input.
    pub nfe: usize,
    pub wall_ms: u128,
    pub mean_clamped_mass: f64,
}

impl EvalReport {
    /// Binomial standard error of `top1`.
    pub fn top1_se(&self) -> f64 {
        (self.top1 * (1.0 - self.top1) / self.n as f64).sqrt()
    }
}

/// Whether `label` is among the `k` most probable classes, ties ranked by lower index.
pub fn in_top_k(p: &ClassDistribution, label: usize, k: usize) -> bool {
    let probs = p.probs();
    let target = probs[label];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count();
    ahead < k
}

/// Metrics for a set of posteriors against labels and true posteriors.
pub fn summarize(
    posteriors: &[ClassDistribution],
    examples: &[Example],
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    nfe: usize,
) -> Result<EvalReport> {
    if examples.is_empty() || posteriors.len() != examples.len() {
        return Err(Error::Invalid(
            "need one posterior per example and at least one example".into(),
        ));
    }
    let k = task.num_classes();
    let (mut top1, mut top5, mut tv, mut nll) = (0usize, 0usize, 0.0, 0.0);
    for (p, ex) in posteriors.iter().zip(examples) {
        top1 += usize::from(in_top_k(p, ex.label, 1));
        top5 += usize::from(in_top_k(p, ex.label, 5));
        tv += p.total_variation(&task.true_posterior(&ex.features, corruption)?);
        nll -= p.probs()[ex.label].max(PROB_FLOOR).ln();
    }
    let n = examples.len() as f64;
    Ok(EvalReport {
        n: examples.len(),
        top1: top1 as f64 / n,
        top5: (k > 5).then(|| top5 as f64 / n),
        mean_tv: tv / n,
        nll: nll / n,
        nfe,
        wall_ms: 0,
        mean_clamped_mass: 0.0,
    })
}

/// Runs the chosen estimator on every example. Input `i` uses random stream
/// `i` (CP selection) or seed `hash(seed, i)` (CL trajectories).
pub fn posteriors<S: Scorer + ?Sized>(
    scorer: &S,
    schedule: &NoiseSchedule,
    method: Method,
    cfg: &SamplerConfig,
    inputs: &[&[f64]],
) -> Result<Vec<PosteriorEstimate>> {
    match method {
        Method::Cp => {
            let mut out = Vec::with_capacity(inputs.len());
            for (c, chunk) in inputs.chunks(CP_CHUNK).enumerate() {
                out.extend(didicm_cp_batch_from(
                    chunk,
                    (c * CP_CHUNK) as u64,
                    scorer,
                    schedule,
                    cfg,
                )?);
            }
            Ok(out)
        }
        Method::Cl => inputs
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let per_input = SamplerConfig {
                    seed: child_seed(cfg.seed, i as u64),
                    ..cfg.clone()
                };
                didicm_cl(y, scorer, schedule, &per_input)
            })
            .collect(),
        Method::Full => inputs
            .iter()
            .map(|y| reverse_full_naive(y, scorer, schedule, cfg))
            .collect(),
    }
}

pub fn evaluate_on<S: Scorer + ?Sized>(
    scorer: &S,
    schedule: &NoiseSchedule,
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    method: Method,
    cfg: &SamplerConfig,
    examples: &[Example],
) -> Result<EvalReport> {
    let start = Instant::now();
    let inputs: Vec<&[f64]> = examples.iter().map(|e| e.features.as_slice()).collect();
    let est = posteriors(scorer, schedule, method, cfg, &inputs)?;
    let wall_ms = start.elapsed().as_millis();
    let clamped = est.iter().map(|e| e.clamped_mass).sum::<f64>() / est.len().max(1) as f64;
    let nfe = est.first().map_or(0, |e| e.nfe);
    let probs: Vec<ClassDistribution> = est.into_iter().map(|e| e.probs).collect();
    let mut report = summarize(&probs, examples, task, corruption, nfe)?;
    report.wall_ms = wall_ms;
    report.mean_clamped_mass = clamped;
    Ok(report)
}

/// Draws `n_eval` fresh examples from `rng` and evaluates on them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    schedule: &NoiseSchedule,
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    method: Method,
    cfg: &SamplerConfig,
    n_eval: usize,
    rng: &mut crate::rng::Rng,
) -> Result<EvalReport> {
    if n_eval == 0 {
        return Err(Error::Invalid("n_eval must be positive".into()));
    }
    let examples = task.generate(n_eval, corruption, rng);
    evaluate_on(scorer, schedule, task, corruption, method, cfg, &examples)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn wall(ms: u128, timed: bool) -> u128 {
    if timed {
        ms
    } else {
        0
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const EVAL_HEADER: &str =
    "method,steps,n_samples,strategy,n,top1,top5,mean_tv,nll,nfe,clamped_mass,wall_ms";

pub fn eval_row(method: Method, cfg: &SamplerConfig, r: &EvalReport, timed: bool) -> String {
    format!(
        "{method},{},{},{},{},{:.6},{},{:.9},{:.9},{},{:.9},{}",
        cfg.n_steps,
        if method == Method::Cl {
            cfg.n_samples
        } else {
            1
        },
        cfg.strategy,
        r.n,
        r.top1,
        fmt_opt(r.top5),
        r.mean_tv,
        r.nll,
        r.nfe,
        r.mean_clamped_mass,
        wall(r.wall_ms, timed)
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub method: Method,
    pub steps: usize,
    pub n_samples: usize,
}

/// CP at 1..16 steps, CL at a few (steps, N) pairs, and the K-call reversal at 4 steps.
pub fn default_sweep_grid() -> Vec<SweepCell> {
    let cp = [1, 2, 4, 8, 16].map(|steps| SweepCell {
        method: Method::Cp,
        steps,
        n_samples: 1,
    });
    let cl = [(1, 16), (2, 16), (4, 16), (8, 16), (2, 64)].map(|(steps, n_samples)| SweepCell {
        method: Method::Cl,
        steps,
        n_samples,
    });
    let full = SweepCell {
        method: Method::Full,
        steps: 4,
        n_samples: 1,
    };
    cp.into_iter().chain(cl).chain([full]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub report: EvalReport,
}

#[allow(clippy::too_many_arguments)]
pub fn nfe_sweep<S: Scorer + ?Sized>(
    scorer: &S,
    schedule: &NoiseSchedule,
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    examples: &[Example],
    grid: &[SweepCell],
    base: &SamplerConfig,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Invalid("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&cell| {
            let cfg = SamplerConfig {
                n_steps: cell.steps,
                n_samples: cell.n_samples,
                ..base.clone()
            };
            let report = evaluate_on(
                scorer,
                schedule,
                task,
                corruption,
                cell.method,
                &cfg,
                examples,
            )?;
            Ok(SweepRow { cell, report })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow], timed: bool) -> String {
    let mut out = String::from("method,steps,n_samples,nfe,top1,top5,tv,wall_ms\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{},{:.9},{}",
            r.cell.method,
            r.cell.steps,
            r.cell.n_samples,
            r.report.nfe,
            r.report.top1,
            fmt_opt(r.report.top5),
            r.report.mean_tv,
            wall(r.report.wall_ms, timed)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub report: EvalReport,
    /// Highest top-1 in the table (first strategy in table order on ties).
    pub best: bool,
}

/// CP under each anchor-selection rule with identical steps and seed.
pub fn selection_ablation<S: Scorer + ?Sized>(
    scorer: &S,
    schedule: &NoiseSchedule,
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    examples: &[Example],
    base: &SamplerConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Strategy::ALL
        .iter()
        .map(|&strategy| {
            let cfg = SamplerConfig {
                strategy,
                ..base.clone()
            };
            let report = evaluate_on(
                scorer,
                schedule,
                task,
                corruption,
                Method::Cp,
                &cfg,
                examples,
            )?;
            Ok(AblationRow {
                strategy,
                report,
                best: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows.iter().enumerate().fold(0, |b, (i, r)| {
        if r.report.top1 > rows[b].report.top1 {
            i
        } else {
            b
        }
    });
    rows[best].best = true;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], steps: usize) -> String {
    let mut out = String::from("strategy,steps,nfe,top1,top5,mean_tv,best\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{:.9},{}",
            r.strategy,
            steps,
            r.report.nfe,
            r.report.top1,
            fmt_opt(r.report.top5),
            r.report.mean_tv,
            u8::from(r.best)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub input_id: usize,
    pub step: usize,
    pub t: f64,
    pub class: usize,
    pub prob: f64,
}

/// The `k` most probable classes at every step of a recorded CP run.
pub fn trace_topk<S: Scorer + ?Sized>(
    scorer: &S,
    schedule: &NoiseSchedule,
    y: &[f64],
    input_id: usize,
    cfg: &SamplerConfig,
    k: usize,
) -> Result<Vec<TraceRow>> {
    let cfg = SamplerConfig {
        record_trajectory: true,
        ..cfg.clone()
    };
    let est = didicm_cp_batch_from(&[y], input_id as u64, scorer, schedule, &cfg)?
        .pop()
        .expect("one input");
    Ok(trajectory_rows(&est, input_id, k))
}

/// Flattens a recorded trajectory to its top-`k` entries per step, most probable first.
pub fn trajectory_rows(est: &PosteriorEstimate, input_id: usize, k: usize) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for point in est.trajectory.iter().flatten() {
        let mut order: Vec<usize> = (0..point.probs.len()).collect();
        order.sort_by(|&a, &b| point.probs[b].total_cmp(&point.probs[a]).then(a.cmp(&b)));
        for &class in order.iter().take(k) {
            rows.push(TraceRow {
                input_id,
                step: point.step,
                t: point.t,
                class,
                prob: point.probs[class],
            });
        }
    }
    rows
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("input_id,step,t,class,prob\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.9},{},{:.12}",
            r.input_id, r.step, r.t, r.class, r.prob
        );
    }
    out
}

/// Evaluates a trained cross-entropy classifier; one network call per input.
pub fn evaluate_baseline(
    clf: &BaselineClassifier,
    task: &MixtureTask,
    corruption: &CorruptionSpec,
    examples: &[Example],
) -> Result<EvalReport> {
    let start = Instant::now();
    let inputs: Vec<&[f64]> = examples.iter().map(|e| e.features.as_slice()).collect();
    let probs = clf.predict_batch(&inputs)?;
    let wall_ms = start.elapsed().as_millis();
    let mut report = summarize(&probs, examples, task, corruption, 1)?;
    report.wall_ms = wall_ms;
    Ok(report)
}

/// Setup for the corruption-level by training-ratio comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub task: MixtureTask,
    pub corruptions: Vec<CorruptionSpec>,
    pub ratios: Vec<f64>,
    /// Training-set size at ratio 1.
    pub train_size: usize,
    pub test_size: usize,
    pub bayes_samples: usize,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl GridConfig {
    /// Three additive-noise levels by three training ratios on the reference
    /// task, sized to run in well under a minute.
    pub fn light(seed: u64) -> Self {
        let noise =
            |tau| CorruptionSpec::new(CorruptionKind::AdditiveNoise, tau).expect("valid level");
        Self {
            task: MixtureTask::reference(),
            corruptions: vec![noise(0.0), noise(1.0), noise(2.0)],
            ratios: vec![1.0, 0.3, 0.1],
            train_size: 5000,
            test_size: 4000,
            bayes_samples: 100_000,
            train: TrainConfig {
                epochs: 6,
                seed,
                scorer: MlpScorerConfig {
                    embed_dim: 32,
                    hidden: 64,
                    blocks: 2,
                    groups: 8,
                    time_input: TimeInput::TotalNoise,
                },
                ..TrainConfig::default()
            },
            sampler: SamplerConfig {
                seed,
                ..SamplerConfig::with_steps(8)
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub corruption: CorruptionSpec,
    pub ratio: f64,
    pub n_train: usize,
    pub didicm: EvalReport,
    pub baseline: EvalReport,
    pub bayes: f64,
    pub bayes_se: f64,
}

impl GridCell {
    pub fn gain(&self) -> f64 {
        self.didicm.top1 - self.baseline.top1
    }

    /// Neither model beats the Bayes accuracy by more than three combined standard errors.
    pub fn within_bayes_bound(&self) -> bool {
        [&self.didicm, &self.baseline].iter().all(|r| {
            let se = (self.bayes_se.powi(2) + r.top1_se().powi(2)).sqrt();
            r.top1 <= self.bayes + 3.0 * se
        })
    }
}

/// Trains both models in every (corruption, ratio) cell and scores them on a shared test set per corruption.
pub fn uncertainty_grid(cfg: &GridConfig) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for (ci, corruption) in cfg.corruptions.iter().enumerate() {
        let ci = ci as u64;
        let train_all =
            cfg.task
                .generate(cfg.train_size, corruption, &mut child(cfg.seed, 100 + ci));
        let test = cfg
            .task
            .generate(cfg.test_size, corruption, &mut child(cfg.seed, 200 + ci));
        let (bayes, bayes_se) = cfg.task.bayes_accuracy(
            corruption,
            cfg.bayes_samples,
            &mut child(cfg.seed, 300 + ci),
        )?;
        for &ratio in &cfg.ratios {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Invalid(format!(
                    "training ratio {ratio} outside (0, 1]"
                )));
            }
            let n = ((cfg.train_size as f64 * ratio).ceil() as usize).clamp(1, cfg.train_size);
            let train = &train_all[..n];
            let model = fit(&cfg.train, &cfg.task, corruption, train, &[])?;
            let didicm = evaluate_on(
                &model.scorer,
                &cfg.train.schedule,
                &cfg.task,
                corruption,
                Method::Cp,
                &cfg.sampler,
                &test,
            )?;
            let mut clf =
                BaselineClassifier::new(&cfg.train, cfg.task.dim(), cfg.task.num_classes())?;
            clf.fit(&cfg.train, train)?;
            let baseline = evaluate_baseline(&clf, &cfg.task, corruption, &test)?;
            cells.push(GridCell {
                corruption: *corruption,
                ratio,
                n_train: n,
                didicm,
                baseline,
                bayes,
                bayes_se,
            });
        }
    }
    Ok(cells)
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from(
        "corruption,ratio,n_train,didicm_top1,baseline_top1,gain,bayes,bayes_se,within_bound\n",
    );
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            c.corruption,
            c.ratio,
            c.n_train,
            c.didicm.top1,
            c.baseline.top1,
            c.gain(),
            c.bayes,
            c.bayes_se,
            u8::from(c.within_bayes_bound())
        );
    }
    out
}

pub const COMPARE_HEADER: &str = "model,n,top1,top5,mean_tv,nll,nfe";

pub fn compare_row(model: &str, r: &EvalReport) -> String {
    format!(
        "{model},{},{:.6},{},{:.9},{:.9},{}",
        r.n,
        r.top1,
        fmt_opt(r.top5),
        r.mean_tv,
        r.nll,
        r.nfe
    )
}
