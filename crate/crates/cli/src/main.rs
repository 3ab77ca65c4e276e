mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "wildssl", version, about = "Self-supervised pretraining pipeline for aerial wildlife patches")]
pub struct Cli {
    /// Run configuration file (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; overrides the seeds of the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Desk-scale defaults: small backbone, 32 px crops, short schedule
    #[arg(long, global = true)]
    pub desk: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic annotated aerial frames
    Synth(SynthArgs),
    /// Cut unlabeled pretraining patches from frames
    Tile(TileArgs),
    /// Cut the labeled foreground/background set with a frame-level split
    BuildDownstream(DownstreamArgs),
    /// Pretrain an encoder
    Pretrain(PretrainArgs),
    /// Linear probe on frozen features
    Probe(EvalArgs),
    /// Train backbone and classifier end to end
    Finetune(FinetuneArgs),
    /// Weighted kNN accuracy of a checkpoint
    Knn(KnnArgs),
    /// Loss and kNN curves plus the results table
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of frames
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    /// Expected animals per frame
    #[arg(long)]
    pub animals: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TileArgs {
    /// Directory of frames (PNG plus annotations.csv)
    #[arg(long)]
    pub input: PathBuf,
    /// Patch side in pixels [default: 256, desk 40]
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub per_frame: usize,
    /// Also tile frames containing animals with this grid overlap fraction
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Write each patch as a PNG next to the manifest
    #[arg(long)]
    pub write_patches: bool,
}

#[derive(Args, Debug)]
pub struct DownstreamArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Background patches per foreground patch in the train split
    #[arg(long, default_value_t = 18.0)]
    pub ratio: f64,
    /// [default: 224, desk 32]
    #[arg(long)]
    pub fg_size: Option<usize>,
    /// [default: 512, desk 64]
    #[arg(long)]
    pub bg_size: Option<usize>,
    #[arg(long)]
    pub write_patches: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Continue from a checkpoint into a new run directory
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Validate and echo the configuration without training
    #[arg(long)]
    pub dry_run: bool,
    /// Weight of the color branch in the geometric loss
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Probability of a mixture step
    #[arg(long)]
    pub mix_p: Option<f64>,
    /// Beta(α, α) parameter of the mixing weight
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frames directory [default: `frames` of the config]
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Downstream manifest [default: `downstream_manifest` of the config]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split to report on
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fraction of train labels used
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Row name in results.csv [default: derived from the checkpoint]
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct KnnArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 0.02)]
    pub t: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories holding metrics.csv
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// results.csv files to tabulate
    #[arg(long, num_args = 1..)]
    pub results: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
