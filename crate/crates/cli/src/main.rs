mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "echobench", version, about = "Echocardiography segmentation benchmark harness")]
pub struct Cli {
    /// Dataset root; relative input paths are resolved against it.
    #[arg(long, global = true, env = "ECHOBENCH_DATA_ROOT")]
    pub data_root: Option<PathBuf>,

    /// Parent directory of the timestamped per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out_root: PathBuf,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export NIfTI frames (and sibling masks) as 16-bit PNGs with sidecars.
    Convert(ConvertArgs),
    /// Build, validate or split sample manifests.
    #[command(subcommand)]
    Manifest(ManifestCommand),
    /// Curate SAM masks into pseudo labels and score them.
    #[command(subcommand)]
    Pseudo(PseudoCommand),
    /// Contrastive pretraining of a U-Net encoder on unlabeled frames.
    Pretrain(PretrainArgs),
    /// Train one model from a run config and a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Sweep loss x resolution x route and tabulate the results.
    Ablate(AblateArgs),
    /// Combine finished runs into a comparison table.
    Report(ReportArgs),
    /// Render input | ground truth | prediction panels for a split.
    Overlay(OverlayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Strategy {
    Middle,
    All,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// A NIfTI file or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "middle")]
    pub strategy: Strategy,
}

#[derive(Debug, Subcommand)]
pub enum ManifestCommand {
    /// Pair images with masks by normalized stem and write a CSV manifest.
    Build {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pair by sorted position instead of by stem (the loose route).
        #[arg(long)]
        loose: bool,
        /// Regex whose first capture group is the patient id.
        #[arg(long)]
        patient_pattern: Option<String>,
        /// Also assign patient-level splits with this seed.
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Check that every record exists, is paired and has a valid weight.
    Validate { manifest: PathBuf },
    /// Assign train/val/test by patient.
    Split {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.7,0.15,0.15")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Union,
    All,
    Fallback,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Assign {
    Score,
    Area,
}

#[derive(Debug, Subcommand)]
pub enum PseudoCommand {
    /// Filter and merge the SAM records of a directory into label maps.
    Curate {
        #[arg(long)]
        sam_dir: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, default_value_t = 200)]
        min_area: u64,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long, value_enum, default_value = "union")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "score")]
        assign: Assign,
    },
    /// Pair curated label maps with their images, weighted as pseudo labels.
    Manifest {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class Dice of pseudo labels against ground truth.
    Score {
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory of 16-bit PNGs or NIfTI sequences.
    #[arg(long)]
    pub frames: PathBuf,
    /// Run config supplying the encoder widths; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pseudo-label manifest merged into the training split when the config enables it.
    #[arg(long)]
    pub pseudo_manifest: Option<PathBuf>,
    /// Pretrained encoder loaded when the config enables SSL initialization.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Manifest for the loose PNG route.
    #[arg(long)]
    pub loose_manifest: Option<PathBuf>,
    /// Manifest for the strict PNG route.
    #[arg(long)]
    pub strict_manifest: Option<PathBuf>,
    /// Comma-separated subset of CE, CE_DICE, CE_DICE_FOCAL.
    #[arg(long)]
    pub losses: Option<String>,
    /// Comma-separated subset of 256, 512.
    #[arg(long)]
    pub resolutions: Option<String>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing report.json.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Render at most this many frames.
    #[arg(long)]
    pub limit: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = commands::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
