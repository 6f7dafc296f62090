use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use didicm::config::parse_key_values;
use didicm::data::{CorruptionSpec, Dataset, Example, MixtureTask};
use didicm::harness::{self, BaselineClassifier, GridConfig};
use didicm::rng::child;
use didicm::sampler::{Method, SamplerConfig, Strategy, TimeGrid};
use didicm::schedule::{NoiseSchedule, DEFAULT_DECAY, DEFAULT_SIGMA_BAR_MAX};
use didicm::score::{
    load_checkpoint, save_checkpoint, ExactScorer, MlpScorer, MlpScorerConfig, Scorer, TimeInput,
};
use didicm::train::{fit, metrics_csv, TrainConfig};
use didicm::{Error, Result};

/// Diffusion-based classification over class labels on synthetic mixture tasks.
#[derive(Parser, Debug)]
#[command(name = "didicm", version, args_override_self = true)]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Plain key=value file; keys are long option names. Command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file (CSV for reports, dataset path for gen-data). Reports go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Write measured wall-clock milliseconds instead of 0.
    #[arg(long, global = true)]
    timed: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a labelled dataset from a mixture task.
    GenData(GenDataArgs),
    /// Train a scorer and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a scorer on a dataset.
    Eval(EvalArgs),
    /// Write estimated posteriors for each input.
    Sample(SampleArgs),
    /// Accuracy against function evaluations for several estimators.
    Sweep(SweepArgs),
    /// Compare anchor-selection strategies.
    Ablate(EvalArgs),
    /// Top-k class probabilities at every reverse step for one input.
    Trace(TraceArgs),
    /// Compare against a cross-entropy classifier of the same size.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// reference | ring:K:DIM:SEPARATION | random:K:DIM:SPREAD
    #[arg(long, default_value = "reference")]
    task: String,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    /// none | noise:SD | mask:PROB | quantize:STEP
    #[arg(long, default_value = "none")]
    corruption: String,
    /// Shared class variance for ring/random tasks.
    #[arg(long, default_value_t = 1.0)]
    variance: f64,
}

#[derive(Args, Debug, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value_t = DEFAULT_SIGMA_BAR_MAX)]
    sigma_bar_max: f64,
    #[arg(long, default_value_t = DEFAULT_DECAY)]
    schedule_decay: f64,
}

impl ScheduleArgs {
    fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sigma_bar_max, self.schedule_decay)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for per-epoch metrics; drawn fresh from the task when omitted.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    eval_size: usize,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Keep the learning rate fixed instead of cosine annealing.
    #[arg(long)]
    constant_lr: bool,
    /// Stratified rather than i.i.d. draws of t within each batch.
    #[arg(long)]
    stratified_t: bool,
    /// Fraction of the training file to use.
    #[arg(long, default_value_t = 1.0)]
    train_ratio: f64,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    /// total-noise | raw
    #[arg(long, default_value = "total-noise")]
    time_input: TimeInput,
    /// CP steps for the per-epoch held-out metrics.
    #[arg(long, default_value_t = 8)]
    eval_steps: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

impl ModelArgs {
    fn train_config(&self, seed: u64, timed: bool) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            grad_clip: self.grad_clip,
            seed,
            schedule: self.schedule.build()?,
            scorer: MlpScorerConfig {
                embed_dim: self.embed_dim,
                hidden: self.hidden,
                blocks: self.blocks,
                groups: self.groups,
                time_input: self.time_input,
            },
            stratified_t: self.stratified_t,
            eval_sampler: SamplerConfig {
                seed,
                ..SamplerConfig::with_steps(self.eval_steps)
            },
            cosine_decay: !self.constant_lr,
            record_wall_time: timed,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct SamplerArgs {
    /// cp | cl | full
    #[arg(long, default_value = "cp")]
    method: Method,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Label trajectories per input (cl only).
    #[arg(long, default_value_t = 16)]
    n_samples: usize,
    /// argmax | sampling | argmin
    #[arg(long, default_value = "argmin")]
    strategy: Strategy,
    /// uniform | total-noise
    #[arg(long, default_value = "uniform")]
    time_grid: TimeGrid,
    /// Fail when one Euler step clamps more than this much probability mass.
    #[arg(long)]
    max_clamp: Option<f64>,
}

impl SamplerArgs {
    fn config(&self, seed: u64) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            n_steps: self.steps,
            strategy: self.strategy,
            n_samples: self.n_samples,
            seed,
            max_clamp: self.max_clamp,
            grid: self.time_grid,
            record_trajectory: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct ScorerArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained scorer; omit together with --exact to use the true-posterior oracle.
    #[arg(long, required_unless_present = "exact")]
    checkpoint: Option<PathBuf>,
    /// Use exact scores from the dataset's task instead of a trained model.
    #[arg(long, conflicts_with = "checkpoint")]
    exact: bool,
    /// Only use the first N inputs.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

enum AnyScorer {
    Mlp(MlpScorer),
    Exact(ExactScorer, NoiseSchedule),
}

impl AnyScorer {
    fn schedule(&self) -> NoiseSchedule {
        match self {
            AnyScorer::Mlp(s) => *s.schedule(),
            AnyScorer::Exact(_, s) => *s,
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            AnyScorer::Mlp(s) => s,
            AnyScorer::Exact(s, _) => s,
        }
    }
}

struct Loaded {
    dataset: Dataset,
    examples: Vec<Example>,
    scorer: AnyScorer,
}

impl ScorerArgs {
    fn load(&self) -> Result<Loaded> {
        let dataset = Dataset::load(&self.data)?;
        let mut examples = dataset.examples.clone();
        if let Some(n) = self.limit {
            examples.truncate(n);
        }
        if examples.is_empty() {
            return Err(Error::Invalid("no inputs to evaluate".into()));
        }
        let scorer = match &self.checkpoint {
            Some(path) => {
                let s = load_checkpoint(path)?;
                if s.num_classes() != dataset.task.num_classes()
                    || s.input_dim() != dataset.task.dim()
                {
                    return Err(Error::Invalid(
                        "checkpoint does not match the dataset's task".into(),
                    ));
                }
                AnyScorer::Mlp(s)
            }
            None => {
                let schedule = self.schedule.build()?;
                AnyScorer::Exact(
                    ExactScorer::new(dataset.task.clone(), dataset.corruption, schedule),
                    schedule,
                )
            }
        };
        Ok(Loaded {
            dataset,
            examples,
            scorer,
        })
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Also write every step's probabilities (input_id, step, class, prob).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value = "argmin")]
    strategy: Strategy,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    input_id: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Training file; required unless --grid.
    #[arg(long, required_unless_present = "grid")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "grid")]
    test_data: Option<PathBuf>,
    /// Reuse a trained scorer instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run the 3x3 corruption-level by training-ratio study on the reference task.
    #[arg(long)]
    grid: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => harness::write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_task(spec: &str, variance: f64, seed: u64) -> Result<MixtureTask> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Invalid(format!("bad number '{s}' in task '{spec}'")))
    };
    match parts.as_slice() {
        ["reference"] => Ok(MixtureTask::reference()),
        ["ring", k, d, sep] => {
            MixtureTask::ring(num(k)? as usize, num(d)? as usize, num(sep)?, variance)
        }
        ["random", k, d, spread] => MixtureTask::random(
            num(k)? as usize,
            num(d)? as usize,
            num(spread)?,
            variance,
            &mut child(seed, 0),
        ),
        _ => Err(Error::Invalid(format!("unknown task '{spec}'"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenData(a) => {
            let path = out.ok_or_else(|| Error::Invalid("gen-data needs --out".into()))?;
            let task = parse_task(&a.task, a.variance, seed)?;
            let corruption: CorruptionSpec = a.corruption.parse()?;
            if a.n == 0 {
                return Err(Error::Invalid("--n must be positive".into()));
            }
            let examples = task.generate(a.n, &corruption, &mut child(seed, 1));
            Dataset {
                task,
                corruption,
                seed,
                examples,
            }
            .save(path)
        }
        Command::Train(a) => {
            let cfg = a.model.train_config(seed, cli.timed)?;
            let data = Dataset::load(&a.data)?;
            let train = data.subsample(a.model.train_ratio)?;
            let held_out = match &a.eval_data {
                Some(p) => Dataset::load(p)?.examples,
                None => data
                    .task
                    .generate(a.eval_size, &data.corruption, &mut child(seed, 2)),
            };
            let outcome = fit(&cfg, &data.task, &data.corruption, &train, &held_out)?;
            save_checkpoint(&outcome.scorer, &a.checkpoint)?;
            emit(out, &metrics_csv(&outcome.metrics))
        }
        Command::Eval(a) => {
            let l = a.scorer.load()?;
            let cfg = a.sampler.config(seed)?;
            let r = harness::evaluate_on(
                l.scorer.scorer(),
                &l.scorer.schedule(),
                &l.dataset.task,
                &l.dataset.corruption,
                a.sampler.method,
                &cfg,
                &l.examples,
            )?;
            emit(
                out,
                &format!(
                    "{}\n{}\n",
                    harness::EVAL_HEADER,
                    harness::eval_row(a.sampler.method, &cfg, &r, cli.timed)
                ),
            )
        }
        Command::Sample(a) => {
            let l = a.scorer.load()?;
            let cfg = SamplerConfig {
                record_trajectory: a.trace.is_some(),
                ..a.sampler.config(seed)?
            };
            let inputs: Vec<&[f64]> = l.examples.iter().map(|e| e.features.as_slice()).collect();
            let est = harness::posteriors(
                l.scorer.scorer(),
                &l.scorer.schedule(),
                a.sampler.method,
                &cfg,
                &inputs,
            )?;
            let mut text = String::from("input_id,label,class,prob\n");
            let mut trace = String::from("input_id,step,class,prob\n");
            for (i, (e, ex)) in est.iter().zip(&l.examples).enumerate() {
                for (c, p) in e.probs.probs().iter().enumerate() {
                    let _ = writeln!(text, "{i},{},{c},{p:.12}", ex.label);
                }
                for point in e.trajectory.iter().flatten() {
                    for (c, p) in point.probs.iter().enumerate() {
                        let _ = writeln!(trace, "{i},{},{c},{p:.12}", point.step);
                    }
                }
            }
            if let Some(path) = &a.trace {
                harness::write_text(path, &trace)?;
            }
            emit(out, &text)
        }
        Command::Sweep(a) => {
            let l = a.scorer.load()?;
            let base = SamplerConfig {
                strategy: a.strategy,
                seed,
                ..SamplerConfig::default()
            };
            let rows = harness::nfe_sweep(
                l.scorer.scorer(),
                &l.scorer.schedule(),
                &l.dataset.task,
                &l.dataset.corruption,
                &l.examples,
                &harness::default_sweep_grid(),
                &base,
            )?;
            emit(out, &harness::sweep_csv(&rows, cli.timed))
        }
        Command::Ablate(a) => {
            let l = a.scorer.load()?;
            let cfg = a.sampler.config(seed)?;
            let rows = harness::selection_ablation(
                l.scorer.scorer(),
                &l.scorer.schedule(),
                &l.dataset.task,
                &l.dataset.corruption,
                &l.examples,
                &cfg,
            )?;
            emit(out, &harness::ablation_csv(&rows, cfg.n_steps))
        }
        Command::Trace(a) => {
            let l = a.scorer.load()?;
            let ex = l
                .examples
                .get(a.input_id)
                .ok_or_else(|| Error::Invalid(format!("input {} out of range", a.input_id)))?;
            let cfg = a.sampler.config(seed)?;
            let rows = harness::trace_topk(
                l.scorer.scorer(),
                &l.scorer.schedule(),
                &ex.features,
                a.input_id,
                &cfg,
                a.k,
            )?;
            emit(out, &harness::trace_csv(&rows))
        }
        Command::Compare(a) => {
            let cfg = a.model.train_config(seed, cli.timed)?;
            if a.grid {
                let grid = GridConfig {
                    train: TrainConfig {
                        schedule: cfg.schedule,
                        ..GridConfig::light(seed).train
                    },
                    sampler: a.sampler.config(seed)?,
                    ..GridConfig::light(seed)
                };
                let cells = harness::uncertainty_grid(&grid)?;
                return emit(out, &harness::grid_csv(&cells));
            }
            let (Some(train_path), Some(test_path)) = (&a.data, &a.test_data) else {
                return Err(Error::Invalid(
                    "compare needs --data and --test-data".into(),
                ));
            };
            let data = Dataset::load(train_path)?;
            let test = Dataset::load(test_path)?;
            if test.task != data.task {
                return Err(Error::Invalid(
                    "training and test files describe different tasks".into(),
                ));
            }
            let train = data.subsample(a.model.train_ratio)?;
            let scorer = match &a.checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => fit(&cfg, &data.task, &data.corruption, &train, &[])?.scorer,
            };
            let sampler = a.sampler.config(seed)?;
            let ours = harness::evaluate_on(
                &scorer,
                scorer.schedule(),
                &test.task,
                &test.corruption,
                a.sampler.method,
                &sampler,
                &test.examples,
            )?;
            let mut clf = BaselineClassifier::new(&cfg, data.task.dim(), data.task.num_classes())?;
            clf.fit(&cfg, &train)?;
            let base =
                harness::evaluate_baseline(&clf, &test.task, &test.corruption, &test.examples)?;
            let bayes: Vec<_> = test
                .examples
                .iter()
                .map(|e| test.task.true_posterior(&e.features, &test.corruption))
                .collect::<Result<_>>()?;
            let oracle =
                harness::summarize(&bayes, &test.examples, &test.task, &test.corruption, 0)?;
            emit(
                out,
                &format!(
                    "{}\n{}\n{}\n{}\n",
                    harness::COMPARE_HEADER,
                    harness::compare_row("didicm", &ours),
                    harness::compare_row("cross-entropy", &base),
                    harness::compare_row("bayes", &oracle)
                ),
            )
        }
    }
}

/// Inserts `--key=value` pairs from the config file right after the
/// subcommand name so that later command-line flags override them.
fn expand_config(args: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let Some(pos) = args
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="))
    else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args.get(pos + 1).cloned().ok_or("--config needs a file")?,
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let pairs = parse_key_values(&text).map_err(|e| format!("config {path}: {e}"))?;
    let names: BTreeSet<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let Some(sub) = args.iter().position(|a| names.contains(a)) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in pairs {
        let key = key.replace('_', "-");
        match value.as_str() {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            _ => injected.push(format!("--{key}={value}")),
        }
    }
    let mut out = args[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_pairs_land_after_the_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "epochs=4\nconstant_lr=true\nstratified_t=false\n").unwrap();
        let args: Vec<String> = [
            "didicm",
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--epochs",
            "2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let out = expand_config(args).unwrap();
        assert_eq!(
            &out[3..],
            ["train", "--constant-lr", "--epochs=4", "--epochs", "2"]
        );
    }
}
