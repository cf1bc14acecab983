//! `xmq`: synthesize, preprocess, train, encode, search and evaluate.

mod commands;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use xmq_core::Modality;

#[derive(Parser, Debug)]
#[command(name = "xmq", version, about = "Collaborative quantization for cross-modal similarity search")]
struct Cli {
    /// Worker threads for data-parallel steps.
    #[arg(long, env = "XMQ_THREADS", global = true)]
    threads: Option<usize>,

    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, default_value = "info", global = true)]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-cluster paired dataset.
    Synth(SynthArgs),
    /// Center, project and normalize a paired dataset.
    Preprocess(PreprocessArgs),
    /// Train a model directory.
    Train(TrainArgs),
    /// Encode feature columns of one modality with a trained model.
    Encode(EncodeArgs),
    /// Answer cross-modal queries against a code database.
    Search(SearchArgs),
    /// Compute MAP@T and precision@T for a results file.
    Eval(EvalArgs),
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    /// Database pairs (queries are generated on top of these).
    #[arg(long, default_value_t = 2000)]
    pub num_pairs: usize,
    #[arg(long, default_value_t = 128)]
    pub dim_a: usize,
    #[arg(long, default_value_t = 64)]
    pub dim_b: usize,
    #[arg(long, default_value_t = 0.7)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Extra pairs held out as queries (written as one row per query).
    #[arg(long, default_value_t = 0)]
    pub num_queries: usize,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub features_a: PathBuf,
    #[arg(long)]
    pub features_b: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub pca_dim: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct TrainArgs {
    /// Modality A features, one column per item.
    #[arg(long)]
    pub features_a: PathBuf,
    /// Modality B features, one column per item.
    #[arg(long)]
    pub features_b: PathBuf,
    /// Labels, needed only with --validate-grid.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Code length; sets M = bits / log2(K).
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub outer_rounds: Option<usize>,
    #[arg(long)]
    pub num_bases: Option<usize>,
    #[arg(long)]
    pub pca_dim: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub gamma_zero: bool,
    #[arg(long)]
    pub lambda_zero: bool,
    #[arg(long)]
    pub shared_dictionary: bool,
    /// Comma-separated values; picks ρ, η, λ, γ one at a time by
    /// validation MAP before the final training run.
    #[arg(long, value_delimiter = ',')]
    pub validate_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw features, one column per item.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub modality: Modality,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Database codes; defaults to the model's training codes.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// Raw query features, one row per query.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub query_modality: Modality,
    #[arg(long, default_value_t = 100)]
    pub top_t: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Score by full reconstruction distance instead of table lookups.
    #[arg(long)]
    pub exhaustive: bool,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub query_labels: PathBuf,
    #[arg(long)]
    pub database_labels: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = xmq_core::eval::DEFAULT_MAP_TS)]
    pub map_t: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = xmq_core::eval::DEFAULT_PRECISION_TS)]
    pub precision_t: Vec<usize>,
    /// Writes `<prefix>.json` and `<prefix>.csv`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Synth(a) => commands::synth(&a, threads),
        Command::Preprocess(a) => commands::preprocess(&a, threads),
        Command::Train(a) => commands::train(&a, threads),
        Command::Encode(a) => commands::encode(&a, threads),
        Command::Search(a) => commands::search(&a, threads),
        Command::Eval(a) => commands::eval(&a, threads),
    }
}
