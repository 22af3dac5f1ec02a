use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "mocapfuse",
    version,
    about = "Multi-camera motion capture from part confidence maps",
    after_help = "Set MOCAPFUSE_LOG (error, warn, info, debug, trace) to control logging."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Identify link lengths and the initial pose; writes skeleton.json.
    Init(InitArgs),
    /// Track a sequence; writes positions, poses, frame table and diagnostics.
    Track(TrackArgs),
    /// Score a tracked sequence against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene description (JSON). Defaults to the built-in scene.
    #[arg(long, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    /// Number of frames, overriding the scene description.
    #[arg(long, value_name = "N")]
    pub frames: Option<u32>,
    /// Noise seed, overriding the scene description.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Inputs shared by `init` and `track`.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Run configuration (JSON): paths plus pipeline settings.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Camera calibration (JSON).
    #[arg(long, value_name = "PATH")]
    pub calib: Option<PathBuf>,
    /// Root of the cam{ID}/rot{angle}/frame{N}.pcm tree.
    #[arg(long, value_name = "DIR")]
    pub pcm_dir: Option<PathBuf>,
    /// Skeleton file; for `track`, one written by `init`.
    #[arg(long, value_name = "PATH")]
    pub skeleton: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Lattice spacing in mm.
    #[arg(long, value_name = "MM")]
    pub lattice_s: Option<f64>,
    /// Lattice half extent (the lattice has (2k+1)^3 points).
    #[arg(long, value_name = "K")]
    pub lattice_k: Option<u32>,
    /// Low-pass cutoff in Hz.
    #[arg(long, value_name = "HZ")]
    pub cutoff_hz: Option<f64>,
    /// Sample rotated heatmaps for tilted subjects.
    #[arg(long, value_enum, value_name = "MODE")]
    pub rotation: Option<Switch>,
    /// Causal (streaming) or offline (zero-phase) smoothing.
    #[arg(long, value_enum, value_name = "MODE")]
    pub filter_mode: Option<FilterModeArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground truth: a truth_positions.csv file or the synth directory holding it.
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// Prediction: a positions.csv file or the track directory holding it.
    #[arg(long, value_name = "PATH")]
    pub pred: Option<PathBuf>,
    /// Output directory for summary.json and series.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterModeArg {
    Causal,
    Offline,
}
