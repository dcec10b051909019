//! `usk`: synthetic data, scene division, training, rendering, evaluation
//! and inspection for partitioned level-of-detail Gaussian splatting.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "usk", version, about = "Partitioned level-of-detail Gaussian splatting on the CPU")]
pub struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Divide a reconstruction into partitions and assign cameras.
    Partition(PartitionArgs),
    /// Train every partition at every level of detail.
    Train(TrainArgs),
    /// Render a trained model from dataset cameras.
    Render(RenderArgs),
    /// Score a trained model on held-out images.
    Eval(EvalArgs),
    /// Summarize a plan, a trained model or a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with synthetic-scene settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long)]
    pub cameras: Option<usize>,
    /// 2 alternates a color-shifted appearance between images.
    #[arg(long)]
    pub variants: Option<usize>,
    /// Write the walled-city visibility fixture (reconstruction only).
    #[arg(long, conflicts_with_all = ["config", "seed", "gaussians", "cameras", "variants"])]
    pub city: bool,
    /// Print the effective settings as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// Dataset directory holding `sparse/0`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `plan.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Side length of the partition grid cells, in world units.
    #[arg(long)]
    pub target_size: f64,
    /// Visibility ratio above which an outside camera is added.
    #[arg(long, default_value_t = 1.0 / 6.0)]
    pub threshold: f64,
    /// Merge and split partitions toward even image counts.
    #[arg(long)]
    pub rebalance: bool,
    /// Also write the expanded-bbox baseline plan with this expansion.
    #[arg(long, default_value_t = 0.5)]
    pub baseline_expansion: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the level-of-detail model.
    #[arg(long)]
    pub out: PathBuf,
    /// Plan from `usk partition`; without it the scene is one partition.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// TOML training configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of levels, halving budget and resolution per level down.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Budget of the finest level (with --levels).
    #[arg(long, requires = "levels")]
    pub budget: Option<usize>,
    #[arg(long)]
    pub no_appearance: bool,
    #[arg(long)]
    pub no_depth: bool,
    /// Depth maps (`<stem>.depth` metric or `<stem>.pfm` relative); defaults
    /// to `<data>/depths` when present.
    #[arg(long)]
    pub depth_dir: Option<PathBuf>,
    /// PNG masks (`<stem>.png`, nonzero keeps a pixel).
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    /// Trained model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory providing the cameras.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Draw the top level of every partition with no frustum culling.
    #[arg(long)]
    pub no_lod: bool,
    /// Distance thresholds, coarse to fine, replacing the trained ones.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Render every splat-tile pair, however faint.
    #[arg(long)]
    pub no_culling: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    /// Output directory for PNGs.
    #[arg(long)]
    pub out: PathBuf,
    /// Decode appearance with this image's embedding instead of each
    /// frame's own.
    #[arg(long)]
    pub appearance_from: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Direct,
    HalfEmbedding,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Direct)]
    pub protocol: ProtocolArg,
    /// Directory for `metrics.jsonl`, `metrics.txt` and `timing.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "target")]
pub struct InspectTarget {
    /// Plan file; the baseline is recomputed from `--data`.
    #[arg(long, requires = "data")]
    pub plan: Option<PathBuf>,
    /// Trained model directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub target: InspectTarget,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Expansion of the baseline plan compared against.
    #[arg(long, default_value_t = 0.5)]
    pub baseline_expansion: f64,
    /// Bins of the visibility histogram.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

/// A failure and whether the user can fix it.
#[derive(Debug)]
pub enum Failure {
    User(String),
    Internal(String),
}

impl From<usk::Error> for Failure {
    fn from(e: usk::Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("USK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("usk: error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("usk: internal error: {e}");
            return ExitCode::from(2);
        }
    }
    let name = commands::name(&cli.command);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("usk {name}: error: {}", m.replace('\n', " "));
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("usk {name}: internal error: {}", m.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
