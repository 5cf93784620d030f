//! `clusterlab` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 runtime
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clusterlab::ClusteringSource;
use thiserror::Error;

use crate::config::DatasetKind;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] clusterlab::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "clusterlab", version, about = "Train and analyze clusterable ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json and history.csv.
    Train(TrainArgs),
    /// Cluster the layers of a checkpoint with spectral co-clustering;
    /// writes clusters.json, clusterability-vs-k.csv and a clustered
    /// checkpoint.json.
    Bsgc(BsgcArgs),
    /// Interventions, sufficiency histograms, effective circuit sizes and
    /// weight heatmaps of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Polytope-count and capacity calculators; writes theory.csv.
    Theory(TheoryArgs),
    /// Continue training one layer with the clusterability penalty until
    /// accuracy degrades or clusterability stops improving.
    SweepMaxClusterability(SweepArgs),
}

/// Flags shared by every subcommand that builds a run configuration.
#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (CLUSTERLAB_OUT takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Contiguous,
    BsgcWeight,
    BsgcGradient,
}

impl From<SourceArg> for ClusteringSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Contiguous => ClusteringSource::Contiguous,
            SourceArg::BsgcWeight => ClusteringSource::BsgcWeight,
            SourceArg::BsgcGradient => ClusteringSource::BsgcGradient,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long, value_enum)]
    clustering_source: Option<SourceArg>,
    /// Comma-separated layer indices to cluster.
    #[arg(long, value_delimiter = ',')]
    clustered_layers: Option<Vec<usize>>,
    /// Keep recording gradient traces after warmup (needed by
    /// `bsgc --source gradient` on runs without warmup).
    #[arg(long)]
    record_grad_trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimilaritySource {
    Weight,
    Gradient,
}

#[derive(Debug, Args)]
struct BsgcArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "weight")]
    source: SimilaritySource,
    /// Number of clusters stored in clusters.json and the checkpoint.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Cluster counts for clusterability-vs-k.csv.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4, 6, 8])]
    ks: Vec<usize>,
    /// Layers to cluster; default every layer but the output layer.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second checkpoint for ecs_compare.csv (percent increase of this
    /// model's circuit sizes over the first).
    #[arg(long)]
    compare: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    interventions: bool,
    #[arg(long)]
    histograms: bool,
    #[arg(long)]
    ecs: bool,
    #[arg(long)]
    heatmap: bool,
    /// Layers to analyze; default every clustered layer.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Cap on evaluation samples per label for circuit sizes.
    #[arg(long)]
    ecs_max_samples: Option<usize>,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    /// Hidden widths for the dense polytope bound, e.g. `64,64`.
    #[arg(long)]
    dense: Vec<String>,
    /// `N_PREV:P1,P2,...`: dense and modular pair counts.
    #[arg(long)]
    pair: Vec<String>,
    /// `I1,I2,...:O1,O2,...`: pair count with both sides split.
    #[arg(long)]
    fully_modular: Vec<String>,
    /// `N:EPS`: Johnson-Lindenstrauss capacity.
    #[arg(long)]
    jl: Vec<String>,
    /// `P1,P2,...`: modular vs dense log capacity.
    #[arg(long)]
    capacity: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    layer: usize,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Largest tolerated test-accuracy drop.
    #[arg(long)]
    tolerance: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Bsgc(a) => commands::bsgc(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Theory(a) => commands::theory(a),
        Command::SweepMaxClusterability(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
