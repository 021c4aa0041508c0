//! Command-line entry point for the LiDAR segmentation pipeline:
//! automatic labeling, grid projection, training, evaluation and
//! inference.

mod commands;
mod frames;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "salsanet",
    version,
    about = "LiDAR point cloud semantic segmentation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Grid view selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    /// Top-down bird-eye view, 256x64 cells with 4 channels.
    Bev,
    /// Spherical front view, 64x512 cells with 6 channels.
    Sfv,
}

#[derive(Subcommand)]
enum Command {
    /// Label scans from camera road masks and 3D object boxes.
    Autolabel(AutolabelArgs),
    /// Project labeled clouds into grid images and label grids.
    Project(ProjectArgs),
    /// Train the segmentation network.
    Train(TrainArgs),
    /// Evaluate a checkpoint against labeled grids.
    Eval(EvalArgs),
    /// Segment a raw scan with a trained checkpoint.
    Infer(InferArgs),
}

#[derive(clap::Args)]
pub struct AutolabelArgs {
    /// Directory of KITTI Velodyne scans (*.bin).
    #[arg(long)]
    pub scans: PathBuf,
    /// Directory of KITTI calibration files (*.txt).
    #[arg(long)]
    pub calib: PathBuf,
    /// Directory of road segmentation masks (*.pgm).
    #[arg(long)]
    pub masks: PathBuf,
    /// Directory of KITTI object label files (*.txt).
    #[arg(long)]
    pub boxes: PathBuf,
    /// Output directory for labeled clouds.
    #[arg(long)]
    pub out: PathBuf,
    /// Gray level at or above which a mask pixel counts as road.
    #[arg(long, default_value_t = 128)]
    pub mask_threshold: u8,
    /// Worker threads for frame processing (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(clap::Args)]
pub struct ProjectArgs {
    /// Directory of labeled clouds (*.bin with *.labels sidecars).
    #[arg(long)]
    pub labeled: PathBuf,
    /// Which grid view to rasterize.
    #[arg(long, value_enum)]
    pub view: ViewArg,
    /// Output directory for grid and label tensors.
    #[arg(long)]
    pub out: PathBuf,
    /// Additionally render each frame's labels as a class-colored PPM.
    #[arg(long)]
    pub export_ppm: bool,
    /// Worker threads for frame processing (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Dataset directory: either projected grids (*.grid.tnsr with
    /// *.labels.tnsr) or labeled clouds (*.bin with *.labels).
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration file (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid view for cloud datasets (ignored for projected grids).
    #[arg(long, value_enum, default_value_t = ViewArg::Bev)]
    pub view: ViewArg,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory of projected grids with label tensors.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the metrics report.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the ground truth against itself, bypassing the model.
    #[arg(long)]
    pub identity: bool,
    /// Worker threads for frame processing (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(clap::Args)]
pub struct InferArgs {
    /// Checkpoint to run.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw KITTI Velodyne scan to segment.
    #[arg(long)]
    pub scan: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid view; defaults to the view the checkpoint was trained for.
    #[arg(long, value_enum)]
    pub view: Option<ViewArg>,
    /// Additionally render the prediction as a class-colored PPM.
    #[arg(long)]
    pub export_ppm: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Autolabel(args) => commands::autolabel(&args),
        Command::Project(args) => commands::project(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Infer(args) => commands::infer(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
