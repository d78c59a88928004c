//! `backfill`: the weekly revision-aware refinement pipeline as a set of
//! independent subcommands. Every run is deterministic in its config and
//! seed; outputs are written atomically with a manifest alongside.

mod cmd;
mod config;
mod out;

use backfill_core::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "backfill", version, about = "Revision-aware forecast refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a vintage CSV and summarize what it holds.
    Ingest(IngestArgs),
    /// Revision-error and stabilization-time tables.
    Stats(StatsArgs),
    /// Cluster backfill sequences by warped shape.
    Cluster(ClusterArgs),
    /// Build the signal-similarity graph for one week.
    Graph(GraphArgs),
    /// Train the sequence encoder on revision histories.
    Pretrain(PretrainArgs),
    /// Correct forecasts toward their eventual stable targets.
    Refine(RefineArgs),
    /// Correct the real-time target itself and rescore forecasts.
    Rectify(RectifyArgs),
    /// Generate a synthetic vintage world from the config.
    Simulate(SimulateArgs),
    /// Compare the refiner against the reference baselines.
    Evaluate(EvaluateArgs),
}

/// Flags shared by every subcommand: IO locations plus hyperparameter
/// overrides applied on top of the JSON config.
#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Vintage CSV input.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Exact edge budget; overrides tau_factor.
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub tau_factor: Option<usize>,
    #[arg(long)]
    pub steps_l: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub model_hidden: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub sample_prob: Option<f64>,
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    #[arg(long)]
    pub target_feature: Option<String>,
    #[arg(long)]
    pub shared_heads: bool,
    #[arg(long)]
    pub scale_graph: bool,
    /// Worker threads for training jobs; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// berr_initial or stime; both when omitted.
    #[arg(long)]
    pub metric: Option<String>,
    /// signal, region, or feature.
    #[arg(long, default_value = "region")]
    pub group_by: String,
    /// mean or median-of-means.
    #[arg(long, default_value = "mean")]
    pub reduce: String,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of clusters.
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Latest issue week the clustering may see; defaults to the final week.
    #[arg(long)]
    pub upto: Option<u32>,
}

#[derive(Args, Debug)]
pub struct GraphArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Week whose visible history feeds the edge weights.
    #[arg(long)]
    pub week: u32,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub week: u32,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Forecast history CSV.
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    #[arg(long)]
    pub week: u32,
    #[arg(long)]
    pub horizon: u32,
    /// Pretrained encoder checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Accept a checkpoint pretrained at an earlier week.
    #[arg(long)]
    pub reuse_pretrain: bool,
}

#[derive(Args, Debug)]
pub struct RectifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub week: u32,
    #[arg(long)]
    pub horizon: u32,
    #[arg(long)]
    pub region: String,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Optional forecast CSV to rescore against the rectified target.
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
    /// Accept a checkpoint pretrained at an earlier week.
    #[arg(long)]
    pub reuse_pretrain: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    #[arg(long)]
    pub week: u32,
    #[arg(long)]
    pub horizon: u32,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Accept a checkpoint pretrained at an earlier week.
    #[arg(long)]
    pub reuse_pretrain: bool,
    /// Independently seeded training replicates per table cell.
    #[arg(long, default_value_t = 1)]
    pub seeds: u32,
}

fn dispatch(cli: Cli) -> backfill_core::Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd::ingest(&a),
        Command::Stats(a) => cmd::stats(&a),
        Command::Cluster(a) => cmd::cluster(&a),
        Command::Graph(a) => cmd::graph(&a),
        Command::Pretrain(a) => cmd::pretrain(&a),
        Command::Refine(a) => cmd::refine(&a),
        Command::Rectify(a) => cmd::rectify(&a),
        Command::Simulate(a) => cmd::simulate(&a),
        Command::Evaluate(a) => cmd::evaluate(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": { "kind": err.kind().as_str(), "message": err.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::from(match err.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
