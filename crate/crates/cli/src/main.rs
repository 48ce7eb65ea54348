mod commands;
mod error;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "structpose", version, about = "Structure-aware adversarial landmark estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset (images + annotations) or 2D/3D pairs.
    Synth(SynthArgs),
    /// Train a generator (pose2d, face) or a lifter (lift3d).
    Train(TrainArgs),
    /// Score a model or a predictions file against annotated data.
    Eval(EvalArgs),
    /// Lift 2D poses to 3D with a trained lifter.
    Lift(LiftArgs),
    /// Render metric curves (CSV) to an SVG or PNG chart.
    Plot(PlotArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Images,
    Pairs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.3)]
    pub occlusion_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub clutter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Index of the first sample; disjoint ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    pub first_index: u64,
    #[arg(long, default_value_t = 0.8)]
    pub pose_noise: f64,
    #[arg(long, value_enum, default_value_t = SynthKind::Images)]
    pub kind: SynthKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Pose2d,
    Face,
    Lift3d,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Train without discriminators.
    #[arg(long)]
    pub baseline: bool,
    /// Training data directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation data directory (best-validation snapshot and patience).
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Config override, repeatable: `--set learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Annotated data: an image dataset or a pairs directory.
    #[arg(long)]
    pub data: PathBuf,
    /// A trained generator or lifter.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// Predictions JSONL instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// MPJPE protocol for 3D data (1: root-aligned, 2: Procrustes); both
    /// when omitted.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub protocol: Option<u8>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LiftArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pairs directory, `pairs.jsonl`, or JSONL of `{"coords2d": [[x, y], ...]}`.
    #[arg(long)]
    pub input: PathBuf,
    /// Std of Gaussian noise added to the 2D inputs (defaults to 0).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Two-column metric CSVs (one series each).
    #[arg(long = "csv", required = true)]
    pub csv: Vec<PathBuf>,
    /// Series labels, in `--csv` order (file stems by default).
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long, default_value = "")]
    pub title: String,
    /// Output file; `.svg` or `.png`.
    #[arg(long)]
    pub out: PathBuf,
}

fn report(e: &CliError) {
    let line = serde_json::json!({
        "level": "ERROR",
        "category": e.category(),
        "message": e.to_string(),
    });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_target(false)
        .without_time()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            report(&CliError::usage(e.kind().to_string()));
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
