//! `far`: data generation, training, sampling, evaluation and analysis.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use far_core::DType;

#[derive(Debug, Parser)]
#[command(name = "far", version = manifest::BUILD_ID, about = "Frame-autoregressive video modeling")]
pub struct Cli {
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working precision.
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<DTypeArg>,
    /// JSON config for the verb (world spec, training, protocol, ablation or model config).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CacheArg {
    None,
    Kv,
    Multilevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BudgetMode {
    Uniform,
    LongShort,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Scc,
    Window,
    Kernel,
    Cache,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Roll a checkpoint out from context frames.
    Sample(SampleArgs),
    /// Run the c/p prediction protocol.
    Eval(EvalArgs),
    /// Token, FLOP and KV-memory curves against context length.
    Budget(BudgetArgs),
    /// Matched-pair ablation suites.
    Ablate(AblateArgs),
    /// Write attention masks as PGM images.
    Maskdump(MaskdumpArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// World spec JSON (falls back to `--config`, then to defaults).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump the first episode as PGM images into this directory.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, value_enum, default_value_t = CacheArg::Kv)]
    pub cache: CacheArg,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    /// Euler steps per frame.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Short-term window; required by `--cache multilevel`.
    #[arg(long)]
    pub short_window: Option<usize>,
    /// Noise level applied to context frames.
    #[arg(long, default_value_t = 0.0)]
    pub context_noise: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset holding the context episode.
    #[arg(long)]
    pub context: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    /// Number of observed frames taken from the episode.
    #[arg(long, default_value_t = 8)]
    pub context_frames: usize,
    /// Number of frames to predict.
    #[arg(long)]
    pub frames: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub c: usize,
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    #[arg(long, default_value_t = 1)]
    pub trajectories: usize,
    /// Average trajectories instead of keeping the best one.
    #[arg(long)]
    pub mean: bool,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[arg(long, default_value_t = 512)]
    pub frames_max: usize,
    #[arg(long, default_value_t = 8)]
    pub frame_step: usize,
    #[arg(long, value_enum, default_value_t = BudgetMode::Both)]
    pub mode: BudgetMode,
    #[arg(long)]
    pub csv: PathBuf,
    /// Model preset when no `--config` is given: tiny, B, M, L or XL.
    #[arg(long, default_value = "B")]
    pub preset: String,
    /// Short-term window `n`.
    #[arg(long, default_value_t = 16)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub which: AblationArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset; the training set is reused when absent.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskdumpArgs {
    /// Short-term (or uniform) frames.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub tpf: usize,
    /// Long-term frames placed before the short-term ones.
    #[arg(long, default_value_t = 0)]
    pub long_frames: usize,
    #[arg(long, default_value_t = 1)]
    pub tpf_long: usize,
    /// Full attention instead of frame-causal.
    #[arg(long)]
    pub full: bool,
    /// Pixels per token in the image.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("far: {e}");
            ExitCode::FAILURE
        }
    }
}
