use std::path::PathBuf;

use clap::{Parser, Subcommand};
use simic::dataio::Split;
use simic::model::{AttentionKind, Backbone, PredictionMode};

#[derive(Debug, Parser)]
#[command(
    name = "simic",
    version,
    about = "Regress field-emitter tip width, height and apex radius from grayscale micrographs",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tip dataset (images plus manifest)
    Synth(SynthArgs),
    /// Assign train/val/eval splits (80:20 then 80:20) in place
    Split(SplitArgs),
    /// Write brightness/contrast variants of the training split
    Augment(AugmentArgs),
    /// Train a model and write a checkpoint plus a per-epoch log
    Train(TrainArgs),
    /// Report RMSE and R² of a checkpoint on one split
    Eval(EvalArgs),
    /// Export attention maps of one image as PGM files and CSV
    Attmap(AttmapArgs),
    /// Measure tips with the classical threshold/contour/circle-fit pipeline
    Baseline(BaselineArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// key=value defaults for this command's flags (flags given on the command line win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 900, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Square image size in pixels
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(8..))]
    pub size: u64,
    /// Scale in nanometres per pixel
    #[arg(long, default_value_t = 10.0)]
    pub scale_nm: f64,
    /// Pull of the apex radius toward the width-matched value, in [0, 1]
    #[arg(long, default_value_t = simic::dataio::SynthSpec::default().radius_coupling)]
    pub radius_coupling: f64,
    /// Render without blur or noise
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace an existing non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct SplitArgs {
    /// key=value defaults for this command's flags (flags given on the command line win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Manifest to update in place
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct AugmentArgs {
    /// key=value defaults for this command's flags (flags given on the command line win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Split manifest to expand
    #[arg(long)]
    pub manifest: PathBuf,
    /// Expanded manifest file name, written next to the source manifest
    #[arg(long, default_value = "manifest_augmented.csv")]
    pub out_name: String,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// key=value defaults for this command's flags (flags given on the command line win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Manifest with train (and optionally val) rows
    #[arg(long)]
    pub manifest: PathBuf,
    /// Backbone family: resnet | effnet | mobile. These are micro-scale
    /// stand-ins (residual skips, compound width/depth scaling, depthwise-separable
    /// convolutions), not the full published architectures
    #[arg(long, default_value = "resnet")]
    pub backbone: Backbone,
    /// Attention: none | additive | mha
    #[arg(long, default_value = "none")]
    pub attention: AttentionKind,
    /// full (predict width, height, radius) | half (width and height given, predict radius)
    #[arg(long, default_value = "full")]
    pub mode: PredictionMode,
    /// Seed for initialization and batch order
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Maximum number of epochs
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    /// Smallest validation-loss decrease counted as improvement
    #[arg(long, default_value_t = 1e-6)]
    pub min_delta: f64,
    /// Huber threshold on normalized targets
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Average the loss over each batch instead of summing
    #[arg(long)]
    pub mean_loss: bool,
    /// Embedding width d
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    /// Attention heads for mha
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Comma-separated channel widths of the stride-2 stages
    #[arg(long, default_value = "16,32,64")]
    pub widths: String,
    #[arg(long, default_value_t = 1)]
    pub blocks_per_stage: usize,
    /// Drop the x/y coordinate input channels
    #[arg(long)]
    pub no_coord: bool,
    /// Checkpoint output path
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    /// Training log CSV path
    #[arg(long, default_value = "train_log.csv")]
    pub log: PathBuf,
    /// Record wall-clock seconds per epoch in the log (otherwise 0)
    #[arg(long)]
    pub timing: bool,
    /// Suppress per-epoch progress on stderr
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// key=value defaults for this command's flags (flags given on the command line win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train | val | eval
    #[arg(long, default_value = "eval")]
    pub split: Split,
    /// Also write the metrics CSV here
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write per-sample predictions (µm) here
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct AttmapArgs {
    /// key=value defaults for this command's flags (flags given on the command line win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (binary PGM)
    #[arg(long)]
    pub image: PathBuf,
    /// Tip width in µm (half-mode checkpoints)
    #[arg(long)]
    pub width: Option<f64>,
    /// Tip height in µm (half-mode checkpoints)
    #[arg(long)]
    pub height: Option<f64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct BaselineArgs {
    /// key=value defaults for this command's flags (flags given on the command line win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// auto (Otsu) or a fixed gray level 0-255
    #[arg(long, default_value = "auto")]
    pub threshold: String,
    /// Report CSV path (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}
