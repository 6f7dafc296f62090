//! Reverse-process posterior estimators.
//!
//! All three start from the uniform distribution at `t = 1` and take Euler steps
//! of the reverse chain down to `t = 0`:
//!
//! * [`didicm_cp`] carries the full probability vector and makes one scorer call
//!   per step, rebuilding the rank-one score matrix from a single column.
//! * [`didicm_cl`] carries `N` sampled labels and averages their terminal one-hots.
//! * [`reverse_full_naive`] queries every column of the score matrix (K calls per step).
//!
//! A step with `σ_t Δt` too large for the Euler kernel gives negative
//! self-transition probabilities; those are clamped to zero and the column
//! renormalised, and the removed mass is reported.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{check_len, Error, Result};
use crate::rng::{child, Rng};
use crate::schedule::NoiseSchedule;
use crate::score::{normalize_scores, score_matrix_rank_one, ScoreColumn, ScoreQuery, Scorer};
use crate::transition::{sample_categorical, ClassDistribution, UniformRate, SIMPLEX_TOLERANCE};

/// How CP picks the anchor label passed to the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    Argmax,
    Sampling,
    #[default]
    Argmin,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Argmax, Strategy::Sampling, Strategy::Argmin];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Argmax => "argmax",
            Strategy::Sampling => "sampling",
            Strategy::Argmin => "argmin",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Strategy::Argmax),
            "sampling" => Ok(Strategy::Sampling),
            "argmin" => Ok(Strategy::Argmin),
            other => Err(Error::Invalid(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Placement of the `n_steps + 1` time points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeGrid {
    /// `t_k = 1 - k / n`.
    #[default]
    Uniform,
    /// Equal increments of total noise `σ̄(t)`.
    TotalNoise,
}

impl fmt::Display for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeGrid::Uniform => "uniform",
            TimeGrid::TotalNoise => "total-noise",
        })
    }
}

impl FromStr for TimeGrid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TimeGrid::Uniform),
            "total-noise" => Ok(TimeGrid::TotalNoise),
            other => Err(Error::Invalid(format!("unknown time grid '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Cp,
    Cl,
    Full,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cp => "cp",
            Method::Cl => "cl",
            Method::Full => "full",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(Method::Cp),
            "cl" => Ok(Method::Cl),
            "full" => Ok(Method::Full),
            other => Err(Error::Invalid(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub strategy: Strategy,
    /// Trajectories per input for CL.
    pub n_samples: usize,
    pub seed: u64,
    /// Largest clamped mass tolerated in a single step; `None` only records it.
    pub max_clamp: Option<f64>,
    pub grid: TimeGrid,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 8,
            strategy: Strategy::default(),
            n_samples: 16,
            seed: 0,
            max_clamp: None,
            grid: TimeGrid::default(),
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(n_steps: usize) -> Self {
        Self {
            n_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Invalid("n_steps must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Invalid("n_samples must be positive".into()));
        }
        if let Some(limit) = self.max_clamp {
            if !(limit >= 0.0) {
                return Err(Error::Invalid(format!(
                    "max_clamp must be >= 0, got {limit}"
                )));
            }
        }
        Ok(())
    }

    /// Time points from 1 down to exactly 0.
    pub fn times(&self, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.n_steps;
        (0..=n)
            .map(|k| {
                let frac = (n - k) as f64 / n as f64;
                match self.grid {
                    TimeGrid::Uniform => Ok(frac),
                    TimeGrid::TotalNoise if k == 0 => Ok(1.0),
                    TimeGrid::TotalNoise if k == n => Ok(0.0),
                    TimeGrid::TotalNoise => {
                        schedule.time_at_total_noise(frac * schedule.sigma_bar_max())
                    }
                }
            })
            .collect()
    }

    fn check_clamp(&self, mass: f64, t: f64) -> Result<()> {
        match self.max_clamp {
            Some(limit) if mass > limit => Err(Error::StepTooLarge { mass, limit, t }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub t: f64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub probs: ClassDistribution,
    /// Scorer evaluations spent on this input.
    pub nfe: usize,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
    /// Probability mass removed by clamping, summed over steps.
    pub clamped_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub probs: ClassDistribution,
    pub clamped_mass: f64,
}

/// The Euler transition matrix `I + R̄ Δt` with `R̄ = S⊙R_t - diag(1ᵀ(S⊙R_t))`,
/// after clamping; returns it with the clamp deficit of each column.
pub fn euler_kernel(s: &Array2<f64>, sigma_t: f64, dt: f64) -> Result<(Array2<f64>, Vec<f64>)> {
    let k = s.nrows();
    check_len(k, s.ncols())?;
    if !(sigma_t >= 0.0 && sigma_t.is_finite() && dt >= 0.0 && dt.is_finite()) {
        return Err(Error::Invalid(format!(
            "bad step: sigma {sigma_t}, dt {dt}"
        )));
    }
    if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Numerical(
            "score matrix must be positive and finite".into(),
        ));
    }
    let weighted = s * &UniformRate::new(k)?.dense(sigma_t);
    let col_sums = weighted.sum_axis(ndarray::Axis(0));
    let diag = weighted.diag().to_owned();
    let mut q = weighted * dt;
    let mut deficits = vec![0.0; k];
    for j in 0..k {
        q[[j, j]] = 1.0 + (diag[j] - col_sums[j]) * dt;
        if q[[j, j]] < 0.0 {
            deficits[j] = -q[[j, j]];
            q[[j, j]] = 0.0;
            let total: f64 = q.column(j).sum();
            q.column_mut(j).mapv_inplace(|v| v / total);
        }
    }
    Ok((q, deficits))
}

/// One reverse Euler step `p ← (I + R̄ Δt) p` from a full score matrix.
pub fn reverse_step_full(
    s: &Array2<f64>,
    p: &ClassDistribution,
    sigma_t: f64,
    dt: f64,
) -> Result<StepOutcome> {
    check_len(s.nrows(), p.num_classes())?;
    let (q, deficits) = euler_kernel(s, sigma_t, dt)?;
    let probs = p.probs();
    let next: Vec<f64> = (0..probs.len())
        .map(|i| (0..probs.len()).map(|j| q[[i, j]] * probs[j]).sum())
        .collect();
    let clamped_mass = deficits.iter().zip(probs).map(|(d, pj)| d * pj).sum();
    let drift = (next.iter().sum::<f64>() - 1.0).abs();
    if drift > SIMPLEX_TOLERANCE {
        return Err(Error::Numerical(format!(
            "Euler step drifted off the simplex by {drift:.3e}"
        )));
    }
    Ok(StepOutcome {
        probs: ClassDistribution::new(next)?,
        clamped_mass,
    })
}

/// Anchor label for the next scorer call; ties go to the lowest index.
pub fn select_label(p: &ClassDistribution, strategy: Strategy, rng: &mut Rng) -> usize {
    match strategy {
        Strategy::Argmax => p.argmax(),
        Strategy::Argmin => p.argmin(),
        Strategy::Sampling => sample_categorical(p.probs(), rng),
    }
}

struct CpState {
    p: ClassDistribution,
    rng: Rng,
    clamped: f64,
    trajectory: Option<Vec<TrajectoryPoint>>,
}

/// Class-probability reverse diffusion for a batch of inputs.
///
/// Input `i` draws its selection randomness from the child stream `(seed, i)`,
/// so results do not depend on batch composition.
pub fn didicm_cp_batch<S: Scorer + ?Sized>(
    inputs: &[&[f64]],
    scorer: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<PosteriorEstimate>> {
    didicm_cp_batch_from(inputs, 0, scorer, schedule, cfg)
}

/// As [`didicm_cp_batch`], with input `i` using stream `first_stream + i`;
/// lets a long list be processed in chunks without changing the results.
pub fn didicm_cp_batch_from<S: Scorer + ?Sized>(
    inputs: &[&[f64]],
    first_stream: u64,
    scorer: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<PosteriorEstimate>> {
    let times = cfg.times(schedule)?;
    let k = scorer.num_classes();
    let mut states: Vec<CpState> = (0..inputs.len())
        .map(|i| {
            let p = ClassDistribution::uniform(k);
            CpState {
                trajectory: cfg.record_trajectory.then(|| {
                    vec![TrajectoryPoint {
                        step: 0,
                        t: 1.0,
                        probs: p.probs().to_vec(),
                    }]
                }),
                p,
                rng: child(cfg.seed, first_stream + i as u64),
                clamped: 0.0,
            }
        })
        .collect();

    for step in 0..cfg.n_steps {
        let (t, dt) = (times[step], times[step] - times[step + 1]);
        let sigma = schedule.sigma(t)?;
        let queries: Vec<ScoreQuery<'_>> = inputs
            .iter()
            .zip(states.iter_mut())
            .map(|(y, st)| ScoreQuery {
                features: y,
                label: select_label(&st.p, cfg.strategy, &mut st.rng),
                t,
            })
            .collect();
        let columns = scorer.score_batch(&queries)?;
        for (st, col) in states.iter_mut().zip(&columns) {
            let q_t = normalize_scores(col)?;
            let s = score_matrix_rank_one(&q_t);
            let out = reverse_step_full(&s, &st.p, sigma, dt)?;
            cfg.check_clamp(out.clamped_mass, t)?;
            st.clamped += out.clamped_mass;
            st.p = out.probs;
            if let Some(tr) = st.trajectory.as_mut() {
                tr.push(TrajectoryPoint {
                    step: step + 1,
                    t: times[step + 1],
                    probs: st.p.probs().to_vec(),
                });
            }
        }
    }

    Ok(states
        .into_iter()
        .map(|st| PosteriorEstimate {
            probs: st.p,
            nfe: cfg.n_steps,
            trajectory: st.trajectory,
            clamped_mass: st.clamped,
        })
        .collect())
}

/// Class-probability reverse diffusion for one input (stream index 0).
pub fn didicm_cp<S: Scorer + ?Sized>(
    y: &[f64],
    scorer: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<PosteriorEstimate> {
    Ok(didicm_cp_batch(&[y], scorer, schedule, cfg)?
        .pop()
        .expect("one input"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelStep {
    pub probs: Vec<f64>,
    /// How far below zero the self-transition probability fell before clamping.
    pub clamped_mass: f64,
}

/// Distribution of the next label given the current label's score column:
/// `s_i σ_t Δt` off the anchor, the remainder on it.
pub fn didicm_cl_step(s: &ScoreColumn, sigma_t: f64, dt: f64) -> Result<LabelStep> {
    if !(sigma_t >= 0.0 && sigma_t.is_finite() && dt >= 0.0 && dt.is_finite()) {
        return Err(Error::Invalid(format!(
            "bad step: sigma {sigma_t}, dt {dt}"
        )));
    }
    let c = s.anchor();
    let mut probs: Vec<f64> = s.values().iter().map(|v| v * sigma_t * dt).collect();
    let off: f64 = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != c)
        .map(|(_, v)| v)
        .sum();
    let stay = 1.0 - off;
    let mut clamped_mass = 0.0;
    if stay < 0.0 {
        clamped_mass = -stay;
        probs[c] = 0.0;
        probs.iter_mut().for_each(|v| *v /= off);
    } else {
        probs[c] = stay;
    }
    Ok(LabelStep {
        probs,
        clamped_mass,
    })
}

/// Label-trajectory reverse diffusion; trajectories run in lockstep so each
/// step is a single batched scorer call, with trajectory `n` drawing from the
/// child stream `(seed, n)`.
pub fn didicm_cl<S: Scorer + ?Sized>(
    y: &[f64],
    scorer: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<PosteriorEstimate> {
    let times = cfg.times(schedule)?;
    let k = scorer.num_classes();
    let n = cfg.n_samples;
    let uniform = vec![1.0 / k as f64; k];
    let mut rngs: Vec<Rng> = (0..n).map(|i| child(cfg.seed, i as u64)).collect();
    let mut labels: Vec<usize> = rngs
        .iter_mut()
        .map(|r| sample_categorical(&uniform, r))
        .collect();
    let histogram = |labels: &[usize]| {
        let mut h = vec![0.0; k];
        labels.iter().for_each(|&c| h[c] += 1.0 / n as f64);
        h
    };
    let mut trajectory = cfg.record_trajectory.then(|| {
        vec![TrajectoryPoint {
            step: 0,
            t: 1.0,
            probs: histogram(&labels),
        }]
    });
    let mut clamped = 0.0;

    for step in 0..cfg.n_steps {
        let (t, dt) = (times[step], times[step] - times[step + 1]);
        let sigma = schedule.sigma(t)?;
        let queries: Vec<ScoreQuery<'_>> = labels
            .iter()
            .map(|&label| ScoreQuery {
                features: y,
                label,
                t,
            })
            .collect();
        let columns = scorer.score_batch(&queries)?;
        for ((label, col), rng) in labels.iter_mut().zip(&columns).zip(rngs.iter_mut()) {
            let next = didicm_cl_step(col, sigma, dt)?;
            cfg.check_clamp(next.clamped_mass, t)?;
            clamped += next.clamped_mass / n as f64;
            *label = sample_categorical(&next.probs, rng);
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(TrajectoryPoint {
                step: step + 1,
                t: times[step + 1],
                probs: histogram(&labels),
            });
        }
    }

    let mut counts = vec![0.0; k];
    labels.iter().for_each(|&c| counts[c] += 1.0);
    Ok(PosteriorEstimate {
        probs: ClassDistribution::from_weights(&counts)?,
        nfe: n * cfg.n_steps,
        trajectory,
        clamped_mass: clamped,
    })
}

/// Reverse diffusion with the full score matrix assembled from K scorer calls per step.
pub fn reverse_full_naive<S: Scorer + ?Sized>(
    y: &[f64],
    scorer: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<PosteriorEstimate> {
    let times = cfg.times(schedule)?;
    let k = scorer.num_classes();
    let mut p = ClassDistribution::uniform(k);
    let mut trajectory = cfg.record_trajectory.then(|| {
        vec![TrajectoryPoint {
            step: 0,
            t: 1.0,
            probs: p.probs().to_vec(),
        }]
    });
    let mut clamped = 0.0;
    for step in 0..cfg.n_steps {
        let (t, dt) = (times[step], times[step] - times[step + 1]);
        let sigma = schedule.sigma(t)?;
        let queries: Vec<ScoreQuery<'_>> = (0..k)
            .map(|label| ScoreQuery {
                features: y,
                label,
                t,
            })
            .collect();
        let columns = scorer.score_batch(&queries)?;
        let s = Array2::from_shape_fn((k, k), |(i, j)| columns[j].values()[i]);
        let out = reverse_step_full(&s, &p, sigma, dt)?;
        cfg.check_clamp(out.clamped_mass, t)?;
        clamped += out.clamped_mass;
        p = out.probs;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(TrajectoryPoint {
                step: step + 1,
                t: times[step + 1],
                probs: p.probs().to_vec(),
            });
        }
    }
    Ok(PosteriorEstimate {
        probs: p,
        nfe: k * cfg.n_steps,
        trajectory,
        clamped_mass: clamped,
    })
}

/// Dispatches to the estimator named by `method`.
pub fn estimate<S: Scorer + ?Sized>(
    method: Method,
    y: &[f64],
    scorer: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<PosteriorEstimate> {
    match method {
        Method::Cp => didicm_cp(y, scorer, schedule, cfg),
        Method::Cl => didicm_cl(y, scorer, schedule, cfg),
        Method::Full => reverse_full_naive(y, scorer, schedule, cfg),
    }
}
