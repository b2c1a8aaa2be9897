//! Command-line experiment runner.
//!
//! Exit status: 0 on success, 2 for invalid input or configuration, 1 for
//! runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedspd::experiment::{self, load_spec, RunContext, TrainTarget};
use fedspd::fed::TrainingMode;
use fedspd::Error;

#[derive(Parser)]
#[command(name = "fedspd", version, about = "Federated early-warning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Plain,
    MetricDp,
    DpSgd,
    DpFedavg,
}

impl From<Mode> for TrainingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Plain => TrainingMode::Plain,
            Mode::MetricDp => TrainingMode::MetricDp,
            Mode::DpSgd => TrainingMode::DpSgd,
            Mode::DpFedavg => TrainingMode::DpFedavg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Warmup,
    Centralized,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment spec (TOML) or a manifest to replay.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Use a centralized baseline instead of federated training.
    #[arg(long, value_enum, conflicts_with = "mode")]
    baseline: Option<Baseline>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the corpus and its split.
    GenCorpus(Common),
    /// Train a model and write its checkpoint, history and privacy report.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Stream the test set through a checkpoint and report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Find the threshold meeting the target FPR and re-evaluate.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the inversion attack over metric-DP noise levels.
    Attack(Common),
    /// Collate report CSVs in the output directory.
    Report(Common),
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("FEDSPD_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::invalid("FEDSPD_THREADS", format!("`{v}` is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid("FEDSPD_THREADS", e.to_string()))?;
    }
    Ok(())
}

/// Spec with CLI overrides, plus the target recorded in a replayed manifest.
fn context(c: &Common, mode: Option<Mode>) -> Result<(RunContext, Option<TrainTarget>), Error> {
    let (mut spec, manifest) = load_spec(&c.spec)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    if let Some(m) = mode {
        spec.federated.mode = m.into();
    }
    let ctx = RunContext::new(spec, c.out.clone(), c.force)?;
    Ok((ctx, manifest.and_then(|m| m.target)))
}

fn target(m: &ModelArgs, ctx: &RunContext, replayed: Option<TrainTarget>) -> TrainTarget {
    match (m.baseline, m.mode) {
        (Some(Baseline::Warmup), _) => TrainTarget::Warmup,
        (Some(Baseline::Centralized), _) => TrainTarget::Centralized,
        (None, Some(_)) => TrainTarget::Federated(ctx.spec.federated.mode),
        (None, None) => replayed.unwrap_or(TrainTarget::Federated(ctx.spec.federated.mode)),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::GenCorpus(c) => {
            let (ctx, _) = context(&c, None)?;
            let m = experiment::cmd_gen_corpus(&ctx).map_err(|e| e.context("gen-corpus"))?;
            println!("wrote {}", m.display());
        }
        Command::Train { common, model } => {
            let (ctx, replayed) = context(&common, model.mode)?;
            let t = target(&model, &ctx, replayed);
            let m = experiment::cmd_train(&ctx, t).map_err(|e| e.context("train"))?;
            println!("wrote {}", m.display());
        }
        Command::Evaluate { common, model, checkpoint } => {
            let (ctx, replayed) = context(&common, model.mode)?;
            let t = target(&model, &ctx, replayed);
            let r = experiment::cmd_evaluate(&ctx, t, checkpoint.as_deref()).map_err(|e| e.context("evaluate"))?;
            println!(
                "{}: f1={} speed={} f_latency={} fpr={}",
                t.label(),
                r.f1,
                r.speed.map_or("undefined".into(), |s| s.to_string()),
                r.f_latency,
                r.fpr.map_or("undefined".into(), |s| s.to_string())
            );
        }
        Command::Calibrate { common, model, checkpoint } => {
            let (ctx, replayed) = context(&common, model.mode)?;
            let t = target(&model, &ctx, replayed);
            let o = experiment::cmd_calibrate(&ctx, t, checkpoint.as_deref()).map_err(|e| e.context("calibrate"))?;
            println!("{}: {} (target fpr {})", t.label(), o.calibration, o.target_fpr);
            println!("  f_latency {} -> {}", o.default.f_latency, o.calibrated.f_latency);
        }
        Command::Attack(c) => {
            let (ctx, _) = context(&c, None)?;
            for r in experiment::cmd_attack(&ctx).map_err(|e| e.context("attack"))? {
                println!("eta={} accuracy={} n={}", r.eta, r.accuracy, r.n_trials);
            }
        }
        Command::Report(c) => {
            let (ctx, _) = context(&c, None)?;
            let p = experiment::cmd_report(&ctx).map_err(|e| e.context("report"))?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
