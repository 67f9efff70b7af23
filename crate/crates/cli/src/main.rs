//! `ditlab`: cost tables, toy training, ablations, sampling and caption statistics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod captions;
mod cost;
mod manifest;
mod train;

use manifest::ConfigError;

/// Exit statuses.
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "ditlab", version, about = "Diffusion-transformer laboratory", propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Spec file, or a manifest.json from an earlier run.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter, MAC and token counts for presets or config files.
    CostReport(cost::CostArgs),
    /// Compare every preset with the published cost table.
    BuildCheck(cost::BuildCheckArgs),
    /// Train a toy model on the synthetic scene data.
    Train(train::TrainArgs),
    /// Run a single-factor ablation.
    Ablate(train::AblateArgs),
    /// Sample latents (and PPM previews) from a trained checkpoint.
    Sample(train::SampleArgs),
    /// Caption length histograms and element-phrase coverage.
    CaptionStats(captions::CaptionArgs),
    /// Cost (and optionally toy training) over a list of config overrides.
    Sweep(cost::SweepArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<ditlab::Error>() {
            return match e {
                ditlab::Error::InvalidConfig(_)
                | ditlab::Error::UnknownPreset { .. }
                | ditlab::Error::Resolution { .. }
                | ditlab::Error::Input(_)
                | ditlab::Error::Unsupported(_)
                | ditlab::Error::Json(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::CostReport(a) => cost::cost_report(a),
        Command::BuildCheck(a) => cost::build_check(a),
        Command::Train(a) => train::train(a),
        Command::Ablate(a) => train::ablate(a),
        Command::Sample(a) => train::sample(a),
        Command::CaptionStats(a) => captions::caption_stats(a),
        Command::Sweep(a) => cost::sweep(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
