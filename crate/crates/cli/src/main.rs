//! `f4d`: data generation, training, evaluation, reconstruction and ablations.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, unknown config keys, refused overwrites. Exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "f4d",
    version,
    about = "4D occupancy and motion-flow reconstruction from point-cloud sequences"
)]
#[command(
    after_help = "Any nested config field can be set as a dotted flag, e.g. `--fusion.mode concat` or `--loss.lambda=0.2`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of deforming shapes.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Extract one mesh per frame of a sequence.
    Reconstruct(ReconstructArgs),
    /// Train and score every cell of a fusion x loss x direction matrix.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the output directory if it already exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// `all` or a comma-separated list of shape families.
    #[arg(long, default_value = "all")]
    pub shapes: String,
    /// Sequences per shape family.
    #[arg(long, default_value_t = 5)]
    pub seqs: usize,
    /// Frames per sequence.
    #[arg(long = "T", default_value_t = 8)]
    pub frames: usize,
    /// Points per frame.
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value = "even")]
    pub temporal: String,
    /// Standard deviation of the per-point Gaussian jitter.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// JSON or TOML file with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory. Defaults to a generated dataset in $F4D_CACHE.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset. Defaults to every 10th sequence of --data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint file, or a run directory (best.ckpt, else last.ckpt).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or a single sequence file.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON or TOML file with EvalConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Samples per metric and frame.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// MISE resolution as `<start>x<steps>`.
    #[arg(long)]
    pub res: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Also write per-frame flow vectors as PLY point clouds.
    #[arg(long)]
    pub flow_export: bool,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence file (`.f4d`).
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value = "32x2")]
    pub res: String,
    /// Mesh file format.
    #[arg(long, default_value = "obj", value_parser = ["obj", "ply"])]
    pub format: String,
    #[arg(long)]
    pub flow_export: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation dataset. Defaults to every 10th sequence of --data, or the
    /// training set when it has a single sequence.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides; `fusion.mode`, `loss.flow_variant` and `loss.directions`
    /// take comma-separated lists and select the matrix axes.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = config::expand_dotted_flags(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
