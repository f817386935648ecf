//! `twostream`: train, inpaint, evaluate, generate masks and render diagnostics.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twostream_core::Error;

#[derive(Debug, Parser)]
#[command(name = "twostream", version, about = "Two-stream structure-aware image inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a generator and discriminator jointly, writing checkpoints and a loss log.
    Train(TrainArgs),
    /// Fill the holes of one image; writes result.png, raw.png and structure.png.
    Inpaint(ModelIo),
    /// Report L1%, PSNR and SSIM per hole-ratio bin over a directory of images.
    Eval(EvalArgs),
    /// Write brush-stroke masks for each hole-ratio bin.
    MakeMasks(MakeMasksArgs),
    /// Write one grayscale gate map per level.
    VizGates(ModelIo),
    /// Write the detailed and structure image predicted at every level.
    VizPyramid(ModelIo),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint, taking its configuration.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    /// Directory of training images [default: from config].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory of mask PNGs; generated masks when unset [default: from config].
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Checkpoint and log directory [default: from config].
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Total optimizer steps [default: from config].
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Steps between checkpoints, 0 for final only [default: from config].
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// [default: from config]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: from config]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: from config].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Comma-separated subset of ms_only, no_gu, no_afblk; "full" for none [default: from config].
    #[arg(long)]
    pub ablation: Option<String>,
    /// Steps between progress lines.
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct ModelIo {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Binary mask PNG, nonzero = hole.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Center-crop and resize inputs to the model size instead of rejecting them.
    #[arg(long, default_value_t = false)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of ground-truth images, resized to the model size.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory of mask PNGs paired with images by sorted order, cycling;
    /// generated masks cycling through the bins when unset.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Hole-ratio bins such as "10-20%,20-30%".
    #[arg(long, default_value = "10-20%,20-30%,30-40%,40-50%")]
    pub bins: String,
    /// Seed for generated masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as key = value lines to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeMasksArgs {
    #[arg(long, default_value = "masks")]
    pub out_dir: PathBuf,
    /// Masks per bin.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Hole-ratio bins such as "10-20%,20-30%".
    #[arg(long, default_value = "10-20%,20-30%,30-40%,40-50%")]
    pub bins: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// 2 for configuration or input problems, 3 for a diverged training run.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Training(_)) => 3,
        Some(Error::Internal(_) | Error::Graph(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Inpaint(a) => commands::inpaint(a),
        Command::Eval(a) => commands::eval(a),
        Command::MakeMasks(a) => commands::make_masks(a),
        Command::VizGates(a) => commands::viz_gates(a),
        Command::VizPyramid(a) => commands::viz_pyramid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
