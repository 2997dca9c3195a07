use std::path::PathBuf;
use std::process::ExitCode;

use basinlab_cli::config::{ConfigError, ExperimentConfig, ExperimentKind};
use basinlab_cli::runner::{self, Check, MANIFEST_NAME};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "basinlab", version, about = "Basin geometry experiments on small MLP students")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train students across widths and measure basin separation.
    WidthSweep(RunArgs),
    /// Check the exponential-tail law on synthetic gaps, or on the reference table.
    LawVerify(RunArgs),
    /// Fit the confident-error law to the reference table.
    LawFit(RunArgs),
    /// Jacobian decomposition and attention-composite properties.
    JacobianSuite(RunArgs),
    /// Input-noise sweep on a trained student.
    Perturb(RunArgs),
    /// Compare per-query error signals.
    DetectSuite(RunArgs),
    /// Train a student with a margin-predicting head.
    Distill(RunArgs),
    /// Re-run a recorded experiment and compare CSV checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Exit with status 3 when any acceptance check fails.
    #[arg(long)]
    check: bool,
}

enum Failure {
    Config(ConfigError),
    ChecksFailed,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Config(c),
            Err(e) => Failure::Other(e),
        }
    }
}

fn resolve(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(kind),
    };
    if cfg.experiment != kind {
        return Err(ConfigError::Invalid {
            path: "experiment".into(),
            message: format!("config is for `{}`, command runs `{}`", cfg.experiment.as_str(), kind.as_str()),
        });
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(checks: &[Check]) {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn execute(kind: ExperimentKind, args: &RunArgs) -> Result<(), Failure> {
    let cfg = resolve(kind, args).map_err(Failure::Config)?;
    let manifest = runner::run(&cfg, args.jobs)?;
    report(&manifest.checks);
    println!("wrote {}", cfg.output_dir.join(MANIFEST_NAME).display());
    if args.check && !manifest.all_passed() {
        return Err(Failure::ChecksFailed);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::WidthSweep(a) => execute(ExperimentKind::WidthSweep, a),
        Command::LawVerify(a) => execute(ExperimentKind::LawVerify, a),
        Command::LawFit(a) => execute(ExperimentKind::LawFitReference, a),
        Command::JacobianSuite(a) => execute(ExperimentKind::JacobianSuite, a),
        Command::Perturb(a) => execute(ExperimentKind::Perturb, a),
        Command::DetectSuite(a) => execute(ExperimentKind::DetectSuite, a),
        Command::Distill(a) => execute(ExperimentKind::Distill, a),
        Command::Replay { manifest, out, jobs } => match runner::replay(manifest, out, *jobs) {
            Ok((_, mismatches)) if mismatches.is_empty() => {
                println!("replay matches: every CSV is byte-identical");
                Ok(())
            }
            Ok((_, mismatches)) => {
                for m in &mismatches {
                    eprintln!("mismatch {m}");
                }
                Err(Failure::ChecksFailed)
            }
            Err(e) => Err(e.into()),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::ChecksFailed) => ExitCode::from(3),
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
