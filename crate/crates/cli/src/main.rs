//! Command-line driver for the full pipeline: data generation, model
//! training, the adversarial attack suite, cross-validated detector
//! evaluation, and report emission.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use segdetect::error::CoreError;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "segdetect", version, about = "Adversarial attack suite and uncertainty-based detection for pixel-wise classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty stage directory.
    #[arg(long)]
    force: bool,
    /// Rewires all stage seeds from one value.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its train/val/test split.
    Generate(StageArgs),
    /// Train the segmentation model and write a checkpoint.
    Train(StageArgs),
    /// Run the attack suite against the frozen checkpoint.
    Attack(StageArgs),
    /// Fit and cross-validate the detectors against every catalog.
    Detect(StageArgs),
    /// Merge the stage outputs into the final report.
    Report(StageArgs),
}

impl Command {
    fn args(&self) -> &StageArgs {
        match self {
            Command::Generate(a)
            | Command::Train(a)
            | Command::Attack(a)
            | Command::Detect(a)
            | Command::Report(a) => a,
        }
    }
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Numeric(_) | CoreError::NoConvergence { .. } => 3,
        _ => 2,
    }
}

fn run(command: &Command) -> Result<(), CoreError> {
    let args = command.args();
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        config.apply_seed_override(seed);
    }
    let out = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
    match command {
        Command::Generate(_) => stages::cmd_generate(&config, &out, args.force),
        Command::Train(_) => stages::cmd_train(&config, &out, args.force),
        Command::Attack(_) => stages::cmd_attack(&config, &out, args.force),
        Command::Detect(_) => stages::cmd_detect(&config, &out, args.force),
        Command::Report(_) => stages::cmd_report(&config, &out, args.force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
