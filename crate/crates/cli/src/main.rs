//! `opir`: dataset generation, training, restoration, evaluation, and
//! benchmarking from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "opir", version, about = "Task-aware per-pixel inverse-operator image restoration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic degraded/clean dataset with a manifest.
    Gen(GenArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score a checkpoint on a manifest (PSNR/SSIM report).
    Eval(EvalArgs),
    /// Summarize a checkpoint, manifest, tensor, or PNG.
    Inspect(InspectArgs),
    /// Time the naive and fast multi-scale filters.
    Bench(BenchArgs),
    /// Train each model variant under one budget and tabulate probe PSNR.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// rain, snow, haze, or all (equal split).
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub count: i64,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Crop clean images from the PNGs in this directory.
    #[arg(long, conflicts_with = "procedural")]
    pub clean: Option<PathBuf>,
    /// Use procedural texture patches as clean images (the default).
    #[arg(long)]
    pub procedural: bool,
    /// Rain as pure attenuation (I = g * J) instead of additive streaks.
    #[arg(long)]
    pub gain_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Task id (0 rain, 1 snow, 2 haze) or name.
    #[arg(long)]
    pub task: String,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Also write the stage-1 output, uncertainty map, and modulated kernels here.
    #[arg(long)]
    pub dump_intermediates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// rgb, y, or auto (y for rain, rgb otherwise).
    #[arg(long, default_value = "auto")]
    pub mode: String,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated HxW sizes.
    #[arg(long, default_value = "256x256")]
    pub sizes: String,
    /// Scale sets separated by ';', each comma-separated.
    #[arg(long, default_value = "1,2,4;1,2,16")]
    pub scales: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated variants; '+' combines, e.g. one-stage+no-tam.
    /// Defaults to the six-row component table.
    #[arg(long)]
    pub variants: Option<String>,
    /// CSV path (default: <out_dir>/ablation.csv).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
