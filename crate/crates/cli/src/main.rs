use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsr_core::config::{PixelPooling, Profile};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "dsr", version, about = "Train, evaluate and inspect DSR surface anomaly detectors")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration layered over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, batching and anomaly synthesis.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Default hyperparameter set.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Paper)]
    pub profile: ProfileArg,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileArg {
    Paper,
    Desk,
    Tiny,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Tiny => Profile::Tiny,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutArg {
    Mvtec,
    Ksdd2,
    Flat,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossArg {
    Both,
    Img,
    Feat,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingArg {
    Dataset,
    PerImage,
}

impl From<PoolingArg> for PixelPooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Dataset => PixelPooling::Dataset,
            PoolingArg::PerImage => PixelPooling::PerImage,
        }
    }
}

/// Where images come from.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LayoutArg::Mvtec)]
    pub layout: LayoutArg,
    /// Restrict an MVTec-style root to one category.
    #[arg(long)]
    pub category: Option<String>,
    /// Pad non-square images instead of stretching them.
    #[arg(long)]
    pub pad: bool,
}

/// Overrides for the stage being trained.
#[derive(Args, Debug, Clone, Default)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iterations between intermediate checkpoints.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the encoder, codebooks and general decoder.
    TrainStage1 {
        #[command(flatten)]
        data: DataArgs,
        /// Train on this many procedural texture images instead of `--data`.
        #[arg(long, conflicts_with = "data")]
        synthetic: Option<usize>,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Train the restriction modules, object decoder and detector.
    TrainStage2 {
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Flat folders (`images/`, `masks/`) of real annotated anomalies.
        #[arg(long)]
        supervised: Vec<PathBuf>,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Train the upsampling module.
    TrainStage3 {
        /// Stage-2 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Anomaly maps and scores for single images or a folder.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory of images.
        #[arg(long)]
        input: PathBuf,
        /// Score with bilinearly upsampled M instead of the upsampling module.
        #[arg(long)]
        no_upsampler: bool,
        /// Overlay threshold.
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Image AUROC, image AP and pixel AP on a test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        no_upsampler: bool,
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
        /// Write input/heatmap/overlay images per test image.
        #[arg(long)]
        overlays: bool,
    },
    /// Write noise masks, smudges and (with a checkpoint) decoded latent anomalies.
    SynthDebug {
        /// Source image; a procedural texture is used when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Second-stage ablation: retrain from a stage-1 checkpoint with the given
    /// switches and evaluate.
    Ablate {
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        lambda_s: Option<f64>,
        #[arg(long)]
        random_sampling: bool,
        #[arg(long)]
        image_space_anomalies: bool,
        #[arg(long, value_enum, default_value_t = LossArg::Both)]
        loss: LossArg,
        #[arg(long)]
        no_upsampler: bool,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Print the resolved configuration and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a procedural texture dataset in the MVTec layout plus a flat
    /// natural-image corpus.
    MakeCorpus {
        #[arg(long, default_value = "weave")]
        kind: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        natural: usize,
        #[arg(long, default_value_t = 120)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test_normal: usize,
        #[arg(long, default_value_t = 20)]
        test_defect: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
