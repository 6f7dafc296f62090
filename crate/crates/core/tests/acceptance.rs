//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;

use didicm::data::{CorruptionSpec, MixtureTask};
use didicm::harness::{evaluate_on, grid_csv, uncertainty_grid, GridConfig};
use didicm::loss::{didicm_logit_grad, didicm_loss, didicm_loss_grad};
use didicm::rng::{seeded, Rng};
use didicm::sampler::{
    didicm_cl, didicm_cp, didicm_cp_batch, euler_kernel, reverse_full_naive, reverse_step_full,
    Method, SamplerConfig,
};
use didicm::schedule::NoiseSchedule;
use didicm::score::{
    exact_score_column, score_matrix_rank_one, ExactScorer, MlpScorer, MlpScorerConfig, ScoreColumn,
};
use didicm::train::{fit, loss_and_grad, noisy_target, TrainConfig};
use didicm::transition::{
    apply_rate, forward_marginal, matrix_exponential_oracle, ClassDistribution, UniformRate,
};

/// Bayes accuracy of the reference task from 10^6 Monte-Carlo draws, computed offline.
const REFERENCE_BAYES: f64 = 0.866563;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_simplex(k: usize, rng: &mut Rng) -> ClassDistribution {
    let w: Vec<f64> = (0..k)
        .map(|_| -rng.random::<f64>().max(1e-300).ln())
        .collect();
    ClassDistribution::from_weights(&w).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn goldens() -> Outcome {
    let rate = UniformRate::new(3).unwrap();
    let p = ClassDistribution::new(vec![0.8, 0.1, 0.1]).unwrap();
    let s = ndarray::Array2::ones((3, 3));
    let mut lines = Vec::new();
    let mut pass = true;
    for (sigma, rate_want, step_want) in [
        (0.2, [-0.28, 0.14, 0.14], [0.774, 0.113, 0.113]),
        (2.5, [-3.5, 1.75, 1.75], [0.5, 0.25, 0.25]),
    ] {
        let got = apply_rate(sigma, p.probs(), rate).unwrap();
        let err = max_abs_diff(&got, &rate_want);
        pass &= err < 1e-12;
        lines.push(format!("apply_rate(sigma={sigma}) err {err:.1e}"));

        let step = reverse_step_full(&s, &p, sigma, 0.1).unwrap();
        let err = max_abs_diff(step.probs.probs(), &step_want);
        pass &= err < 1e-12;
        lines.push(format!(
            "reverse_step_full(sigma={sigma}) = {:?} vs {step_want:?} err {err:.1e}",
            step.probs
                .probs()
                .iter()
                .map(|v| (v * 1e6).round() / 1e6)
                .collect::<Vec<_>>()
        ));
    }
    outcome(pass, lines.join("; "))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = seeded(2);
    let mut worst = 0.0f64;
    for k in [2, 3, 5, 16] {
        for sigma_bar in [0.0, 0.1, 1.0, 5.0, 20.0] {
            let m = matrix_exponential_oracle(k, sigma_bar).unwrap();
            for _ in 0..100 {
                let q0 = random_simplex(k, &mut rng);
                let want = m.dot(&ndarray::arr1(q0.probs()));
                let got = forward_marginal(&q0, sigma_bar).unwrap();
                worst = worst.max(max_abs_diff(got.probs(), want.as_slice().unwrap()));
            }
        }
    }
    outcome(worst < 1e-9, format!("max entrywise error {worst:.2e}"))
}

/// Error at `t_end` of forward Euler on `dq/dt = sigma R q` against the closed form.
fn forward_euler_error(q0: &ClassDistribution, sigma: f64, t_end: f64, dt: f64) -> f64 {
    let rate = UniformRate::new(q0.num_classes()).unwrap();
    let n = (t_end / dt).round() as usize;
    let mut q = q0.probs().to_vec();
    for _ in 0..n {
        let d = apply_rate(sigma, &q, rate).unwrap();
        q.iter_mut().zip(d).for_each(|(a, b)| *a += dt * b);
    }
    let exact = forward_marginal(q0, sigma * t_end).unwrap();
    max_abs_diff(&q, exact.probs())
}

/// Error at time 0 of the reverse Euler kernel driven by exact scores, started
/// from the exact marginal at `t_end`.
fn reverse_euler_error(q0: &ClassDistribution, sigma: f64, t_end: f64, dt: f64) -> f64 {
    let n = (t_end / dt).round() as usize;
    let mut p = forward_marginal(q0, sigma * t_end).unwrap().into_vec();
    for i in 0..n {
        let t = t_end - i as f64 * dt;
        let q_t = forward_marginal(q0, sigma * t).unwrap();
        let (kernel, _) = euler_kernel(&score_matrix_rank_one(&q_t), sigma, dt).unwrap();
        p = kernel.dot(&ndarray::arr1(&p)).to_vec();
    }
    max_abs_diff(&p, q0.probs())
}

fn euler_order() -> Outcome {
    let q0 = ClassDistribution::new(vec![0.5, 0.2, 0.15, 0.1, 0.05]).unwrap();
    let (sigma, t_end) = (0.2, 1.0);
    let dts: Vec<f64> = (4..=10).map(|e| 2f64.powi(-e)).collect();
    let ratios = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        let errs: Vec<f64> = dts.iter().map(|&dt| f(dt)).collect();
        errs.windows(2).map(|w| w[0] / w[1]).collect()
    };
    let fwd = ratios(&|dt| forward_euler_error(&q0, sigma, t_end, dt));
    let rev = ratios(&|dt| reverse_euler_error(&q0, sigma, t_end, dt));
    let ok = |r: &[f64]| r.iter().all(|x| (1.8..=2.2).contains(x));
    let show = |r: &[f64]| {
        r.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    outcome(
        ok(&fwd) && ok(&rev),
        format!(
            "forward ratios [{}]; reverse ratios [{}]",
            show(&fwd),
            show(&rev)
        ),
    )
}

fn perturbed_column(s: &ScoreColumn, rng: &mut Rng) -> ScoreColumn {
    let j = s.anchor();
    let v = s
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if i == j {
                1.0
            } else {
                x * (rng.random_range(-1.5..1.5f64)).exp()
            }
        })
        .collect();
    ScoreColumn::new(v, j).unwrap()
}

fn random_column(k: usize, rng: &mut Rng) -> ScoreColumn {
    let q = random_simplex(k, rng);
    exact_score_column(&q, rng.random_range(0..k)).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn loss_checks() -> Outcome {
    let mut rng = seeded(4);
    let mut worst_zero = 0.0f64;
    let mut non_positive = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(2..12);
        let s = random_column(k, &mut rng);
        let sigma = rng.random_range(0.01..5.0);
        worst_zero = worst_zero.max(didicm_loss(&s, &s, sigma).unwrap().total.abs());
        let pert = perturbed_column(&s, &mut rng);
        if pert.values() != s.values() && didicm_loss(&s, &pert, sigma).unwrap().total <= 0.0 {
            non_positive += 1;
        }
    }

    let h = 1e-6;
    let (mut worst_score, mut worst_logit) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let s = random_column(k, &mut rng);
        let sigma = rng.random_range(0.05..3.0);
        let j = s.anchor();
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pred = ScoreColumn::from_logits(&z, j).unwrap();

        let g = didicm_loss_grad(&s, &pred, sigma).unwrap();
        let i = (j + 1 + rng.random_range(0..k - 1)) % k;
        let at = |x: f64| {
            let mut v = pred.values().to_vec();
            v[i] = x;
            didicm_loss(&s, &ScoreColumn::new(v, j).unwrap(), sigma)
                .unwrap()
                .total
        };
        let x = pred.values()[i];
        let fd = (at(x + h * x) - at(x - h * x)) / (2.0 * h * x);
        worst_score = worst_score.max(rel_err(g[i], fd));

        let gz = didicm_logit_grad(&s, &pred, sigma).unwrap();
        let m = rng.random_range(0..k);
        let at_z = |d: f64| {
            let mut zz = z.clone();
            zz[m] += d;
            didicm_loss(&s, &ScoreColumn::from_logits(&zz, j).unwrap(), sigma)
                .unwrap()
                .total
        };
        let fd = (at_z(h) - at_z(-h)) / (2.0 * h);
        worst_logit = worst_logit.max(rel_err(gz[m], fd));
    }

    let worst_net = network_gradient_error(&mut rng);
    let pass = worst_zero < 1e-12
        && non_positive == 0
        && worst_score < 1e-4
        && worst_logit < 1e-4
        && worst_net < 1e-4;
    outcome(
        pass,
        format!(
            "|L(s,s)| max {worst_zero:.1e}; non-positive perturbed {non_positive}/10000; \
             grad rel err: score {worst_score:.1e}, logit {worst_logit:.1e}, through scorer {worst_net:.1e}"
        ),
    )
}

/// Central differences on scorer parameters through the full loss pipeline.
fn network_gradient_error(rng: &mut Rng) -> f64 {
    let task = MixtureTask::ring(4, 2, 3.0, 1.0).unwrap();
    let schedule = NoiseSchedule::default();
    let cfg = MlpScorerConfig {
        embed_dim: 4,
        hidden: 8,
        blocks: 1,
        groups: 2,
        ..MlpScorerConfig::default()
    };
    let mut scorer = MlpScorer::new(cfg, 2, 4, schedule, rng).unwrap();
    let mut params = scorer.network().params().to_vec();
    for p in params.iter_mut() {
        *p += 0.3 * rng.random_range(-1.0..1.0);
    }
    scorer.network_mut().set_params(params.clone()).unwrap();
    let examples = task.generate(6, &CorruptionSpec::none(), rng);
    let inputs: Vec<&[f64]> = examples.iter().map(|e| e.features.as_slice()).collect();
    let targets: Vec<_> = examples
        .iter()
        .map(|e| {
            let q0 = task
                .true_posterior(&e.features, &CorruptionSpec::none())
                .unwrap();
            noisy_target(&q0, rng.random_range(0.05..1.0), &schedule, rng).unwrap()
        })
        .collect();
    let (_, grad) = loss_and_grad(&scorer, &inputs, &targets).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for idx in 0..params.len() {
        let mut eval = |d: f64| {
            let mut p = params.clone();
            p[idx] += d;
            scorer.network_mut().set_params(p).unwrap();
            loss_and_grad(&scorer, &inputs, &targets).unwrap().0.loss
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        if grad[idx].abs().max(fd.abs()) > 1e-7 {
            worst = worst.max(rel_err(grad[idx], fd));
        }
    }
    worst
}

fn ten_class() -> (MixtureTask, ExactScorer, NoiseSchedule) {
    let task = MixtureTask::ring(10, 2, 3.0, 1.0).unwrap();
    let schedule = NoiseSchedule::default();
    let scorer = ExactScorer::new(task.clone(), CorruptionSpec::none(), schedule);
    (task, scorer, schedule)
}

fn posterior_recovery() -> Outcome {
    let (task, scorer, schedule) = ten_class();
    let examples = task.generate(1000, &CorruptionSpec::none(), &mut seeded(5));
    let truths: Vec<ClassDistribution> = examples
        .iter()
        .map(|e| {
            task.true_posterior(&e.features, &CorruptionSpec::none())
                .unwrap()
        })
        .collect();
    let inputs: Vec<&[f64]> = examples.iter().map(|e| e.features.as_slice()).collect();
    let mut tvs = Vec::new();
    for steps in [2, 4, 8, 16, 32, 64, 128, 256] {
        let est = didicm_cp_batch(
            &inputs,
            &scorer,
            &schedule,
            &SamplerConfig::with_steps(steps),
        )
        .unwrap();
        let tv = est
            .iter()
            .zip(&truths)
            .map(|(e, t)| e.probs.total_variation(t))
            .sum::<f64>()
            / 1000.0;
        tvs.push(tv);
    }
    let last = *tvs.last().unwrap();
    let monotone = tvs.windows(2).all(|w| w[1] <= w[0] + 1e-3);
    outcome(
        last < 1e-2 && monotone,
        format!(
            "mean TV by steps 2..256: [{}]",
            tvs.iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        ),
    )
}

fn estimator_consistency() -> Outcome {
    let (task, scorer, schedule) = ten_class();
    let examples = task.generate(50, &CorruptionSpec::none(), &mut seeded(6));
    let cfg = SamplerConfig::with_steps(8);
    let k = task.num_classes();

    let mut worst_full = 0.0f64;
    let mut nfe_ok = true;
    for e in &examples {
        let cp = didicm_cp(&e.features, &scorer, &schedule, &cfg).unwrap();
        let full = reverse_full_naive(&e.features, &scorer, &schedule, &cfg).unwrap();
        worst_full = worst_full.max(max_abs_diff(cp.probs.probs(), full.probs.probs()));
        nfe_ok &= cp.nfe == cfg.n_steps && full.nfe == k * cfg.n_steps;
    }

    let n = 20_000;
    let cl_cfg = SamplerConfig {
        n_samples: n,
        ..cfg.clone()
    };
    let mut cl_ok = true;
    let mut worst_margin = f64::NEG_INFINITY;
    for (i, e) in examples.iter().take(10).enumerate() {
        let cp = didicm_cp(&e.features, &scorer, &schedule, &cfg).unwrap();
        let cl = didicm_cl(
            &e.features,
            &scorer,
            &schedule,
            &SamplerConfig {
                seed: i as u64,
                ..cl_cfg.clone()
            },
        )
        .unwrap();
        let sd: f64 = cp
            .probs
            .probs()
            .iter()
            .map(|p| (p * (1.0 - p) / n as f64).sqrt())
            .sum::<f64>()
            / 2.0;
        let bound = 0.02 + 3.0 * sd;
        let tv = cl.probs.total_variation(&cp.probs);
        worst_margin = worst_margin.max(tv - bound);
        cl_ok &= tv <= bound;
        nfe_ok &= cl.nfe == n * cfg.n_steps;
    }
    outcome(
        worst_full < 1e-10 && cl_ok && nfe_ok,
        format!("full vs cp max diff {worst_full:.1e}; cl tv - bound max {worst_margin:.4}; nfe accounting {nfe_ok}"),
    )
}

struct Trained {
    seed: u64,
    top1_8: f64,
    top1_2: f64,
    top1_64: f64,
}

fn train_reference(seed: u64) -> Trained {
    let task = MixtureTask::reference();
    let none = CorruptionSpec::none();
    let train = task.generate(20_000, &none, &mut didicm::rng::child(seed, 10));
    let test = task.generate(10_000, &none, &mut didicm::rng::child(seed, 11));
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let model = fit(&cfg, &task, &none, &train, &[]).unwrap();
    let top1 = |steps| {
        let sampler = SamplerConfig {
            seed,
            ..SamplerConfig::with_steps(steps)
        };
        evaluate_on(
            &model.scorer,
            &cfg.schedule,
            &task,
            &none,
            Method::Cp,
            &sampler,
            &test,
        )
        .unwrap()
        .top1
    };
    Trained {
        seed,
        top1_8: top1(8),
        top1_2: top1(2),
        top1_64: top1(64),
    }
}

fn end_to_end(runs: &[Trained], elapsed: Duration) -> Outcome {
    let pass = runs
        .iter()
        .all(|r| (r.top1_8 - REFERENCE_BAYES).abs() <= 0.02)
        && elapsed < Duration::from_secs(300);
    let detail = runs
        .iter()
        .map(|r| format!("seed {} top1@8 {:.4}", r.seed, r.top1_8))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        pass,
        format!(
            "{detail}; bayes {REFERENCE_BAYES}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn uncertainty_trend() -> Outcome {
    let cfg = GridConfig::light(8);
    let first = uncertainty_grid(&cfg).unwrap();
    let second = uncertainty_grid(&cfg).unwrap();
    let (a, b) = (grid_csv(&first), grid_csv(&second));
    let bounded = first.iter().filter(|c| c.within_bayes_bound()).count();
    let gains = first
        .iter()
        .map(|c| format!("{:+.3}", c.gain()))
        .collect::<Vec<_>>()
        .join(",");
    outcome(
        a == b && first.len() == 9 && bounded == first.len(),
        format!(
            "{} cells, identical csv {}, within Bayes bound {bounded}/{}; gains [{gains}]",
            first.len(),
            a == b,
            first.len()
        ),
    )
}

fn two_step_efficiency(runs: &[Trained]) -> Outcome {
    let pass = runs.iter().all(|r| (r.top1_2 - r.top1_64).abs() <= 0.005);
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "seed {} top1@2 {:.4} top1@64 {:.4}",
                r.seed, r.top1_2, r.top1_64
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_didicm"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn cli_pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    run_cli(
        dir,
        &[
            "gen-data",
            "--seed",
            "3",
            "--n",
            "4000",
            "--out",
            "train.bin",
        ],
    )?;
    run_cli(
        dir,
        &[
            "gen-data", "--seed", "4", "--n", "2000", "--out", "test.bin",
        ],
    )?;
    run_cli(
        dir,
        &[
            "train",
            "--seed",
            "7",
            "--data",
            "train.bin",
            "--eval-data",
            "test.bin",
            "--epochs",
            "3",
            "--checkpoint",
            "model.ckpt",
            "--out",
            "metrics.csv",
        ],
    )?;
    run_cli(
        dir,
        &[
            "eval",
            "--seed",
            "7",
            "--data",
            "test.bin",
            "--checkpoint",
            "model.ckpt",
            "--out",
            "eval_cp.csv",
        ],
    )?;
    run_cli(
        dir,
        &[
            "eval",
            "--seed",
            "7",
            "--data",
            "test.bin",
            "--checkpoint",
            "model.ckpt",
            "--method",
            "cl",
            "--limit",
            "300",
            "--out",
            "eval_cl.csv",
        ],
    )?;
    ["metrics.csv", "eval_cp.csv", "eval_cl.csv", "model.ckpt"]
        .iter()
        .map(|f| {
            std::fs::read(dir.join(f))
                .map(|b| (f.to_string(), b))
                .map_err(|e| format!("{f}: {e}"))
        })
        .collect()
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Result<Vec<_>, String> = dirs.iter().map(|d| cli_pipeline(d.path())).collect();
    match runs {
        Err(e) => outcome(false, e),
        Ok(runs) => {
            let same: Vec<String> = runs[0]
                .iter()
                .zip(&runs[1])
                .map(|((name, a), (_, b))| {
                    format!("{name} {}", if a == b { "identical" } else { "DIFFERS" })
                })
                .collect();
            outcome(runs[0] == runs[1], same.join(", "))
        }
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        o.pass &= elapsed < limit;
        o.detail = format!(
            "{}; {:.2}s (limit {}s)",
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    } else {
        o.detail = format!("{}; {:.2}s", o.detail, elapsed.as_secs_f64());
    }
    o
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut results = vec![
        ("golden values", timed(secs(1), goldens)),
        (
            "forward marginal vs matrix exponential",
            timed(secs(10), oracle_equivalence),
        ),
        ("first-order Euler convergence", timed(None, euler_order)),
        ("loss optimum and gradients", timed(None, loss_checks)),
        (
            "posterior recovery with exact scores",
            timed(secs(60), posterior_recovery),
        ),
        (
            "cp / cl / full consistency",
            timed(None, estimator_consistency),
        ),
    ];
    let start = Instant::now();
    let runs: Vec<Trained> = (0..3).map(train_reference).collect();
    results.push(("end-to-end training", end_to_end(&runs, start.elapsed())));
    results.push(("uncertainty grid", timed(None, uncertainty_trend)));
    results.push(("two-step efficiency", two_step_efficiency(&runs)));
    results.push(("cli determinism", timed(None, determinism)));

    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "criterion {:>2} {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
