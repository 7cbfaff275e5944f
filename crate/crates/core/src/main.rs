use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use blurattack::attack::{AttackMode, SigmaGradient};
use blurattack::data::DatasetKind;
use blurattack::harness::{self, Command, ExperimentSpec, SpecOverrides, SweepAxis};
use blurattack::tensor::PaddingMode;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blurattack", version, about = "Peak Suppression and Gaussian-blur attacks on toy classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and save it to --model.
    Train(Common),
    /// Attack every correctly classified evaluation sample.
    Attack(Common),
    /// Attack the evaluation set once per axis value.
    Sweep(SweepArgs),
    /// Trace blur manifolds of evaluation samples.
    Manifold(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file with default values; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_parser = parse::<DatasetKind>)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_parser = parse::<AttackMode>)]
    mode: Option<AttackMode>,
    #[arg(long)]
    kernel_scale: Option<usize>,
    #[arg(long)]
    sigma_init: Option<f64>,
    #[arg(long, value_parser = parse::<PaddingMode>)]
    padding: Option<PaddingMode>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    /// `exact` or `paper`.
    #[arg(long, value_parser = parse_gradient)]
    sigma_gradient: Option<SigmaGradient>,
    /// Targeted blur attack toward this class.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Use at most this many evaluation samples.
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// `kernel-scale` or `sigma-init`.
    #[arg(long, value_parser = parse::<SweepAxis>)]
    axis: Option<SweepAxis>,
    /// Comma-separated ascending axis values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

fn parse<T: std::str::FromStr<Err = blurattack::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: blurattack::Error| e.to_string())
}

fn parse_gradient(s: &str) -> Result<SigmaGradient, String> {
    match s {
        "exact" => Ok(SigmaGradient::Exact),
        "paper" => Ok(SigmaGradient::Paper),
        other => Err(format!("unknown σ gradient '{other}'")),
    }
}

impl Common {
    fn overrides(self) -> anyhow::Result<SpecOverrides> {
        let base = match &self.config {
            Some(p) => SpecOverrides::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => SpecOverrides::default(),
        };
        Ok(base.overlay(SpecOverrides {
            model: self.model,
            out: self.out,
            workers: self.workers,
            max_samples: self.max_samples,
            dataset: self.dataset,
            data_seed: self.data_seed,
            mode: self.mode,
            kernel_scale: self.kernel_scale,
            sigma_init: self.sigma_init,
            padding: self.padding,
            max_iters: self.max_iters,
            step: self.step,
            sigma_gradient: self.sigma_gradient,
            target: self.target,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            ..Default::default()
        }))
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Cmd::Train(c) => {
            let spec = ExperimentSpec::resolve(Command::Train, c.overrides()?)?;
            let r = harness::run_train(&spec).context("training failed")?;
            println!(
                "trained {} epochs: train accuracy {:.4}, test accuracy {}, loss {:.6}",
                r.epochs,
                r.train_accuracy,
                r.test_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}")),
                r.final_loss
            );
            println!("model written to {}", spec.model.display());
            Ok(true)
        }
        Cmd::Attack(c) => {
            let spec = ExperimentSpec::resolve(Command::Attack, c.overrides()?)?;
            let run = harness::run_attack(&spec)?;
            let s = &run.summary;
            println!(
                "{} attack: {} attacked, {} flipped, error rate {:.4}, single-step rate {:.4}, mean iterations {:.2}, low-confidence fraction {:.4}",
                s.mode, s.attacked, s.successes, s.error_rate, s.single_step_rate, s.mean_iters, s.low_confidence_fraction
            );
            Ok(true)
        }
        Cmd::Sweep(a) => {
            let mut o = a.common.overrides()?;
            o.sweep_axis = a.axis.or(o.sweep_axis);
            o.sweep_values = a.values.or(o.sweep_values);
            let spec = ExperimentSpec::resolve(Command::Sweep, o)?;
            let rows = harness::run_sweep(&spec)?;
            print!("{}", harness::io::sweep_to_csv(&rows));
            Ok(!harness::sweep_failed(&rows))
        }
        Cmd::Manifold(c) => {
            let spec = ExperimentSpec::resolve(Command::Manifold, c.overrides()?)?;
            let studies = harness::run_manifold(&spec)?;
            let points: usize = studies.iter().map(|s| s.row.points).sum();
            let passed: usize = studies.iter().map(|s| s.row.plane_pass).sum();
            let crossing = studies.iter().filter(|s| s.row.attains_other_class).count();
            println!(
                "{} traces, {crossing} reach another class, plane membership {passed}/{points}",
                studies.len()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some sub-runs failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
