//! `elevest`: train, index, estimate and evaluate camera elevations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] elevest_core::Error),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("missing {0}: pass the flag or set it in the config file")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Parser, Debug)]
#[command(name = "elevest", version, about = "Camera elevation estimation from outdoor photographs")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Corpus manifest (JSON lines).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Dataset split file written by `split` or `synth`.
    #[arg(long, global = true)]
    pub split: Option<PathBuf>,
    /// Directory holding `<id>.elfv`; overrides manifest feature paths.
    #[arg(long, global = true)]
    pub features_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// Short-vector model.
    #[arg(long, global = true)]
    pub mvocab: Option<PathBuf>,
    /// Short-vector database of training images.
    #[arg(long, global = true)]
    pub mvocab_db: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true)]
    pub t_sp: Option<usize>,
    #[arg(long, global = true)]
    pub w_t: Option<f64>,
    /// Short-vector dimensionality.
    #[arg(long, global = true)]
    pub dims: Option<usize>,
    /// Fallback used when no retrieved image verifies.
    #[arg(long, global = true, value_enum)]
    pub secondary: Option<SecondaryKind>,
    /// Predictions CSV consumed by `--secondary external`.
    #[arg(long, global = true)]
    pub external_predictions: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SecondaryKind {
    Mvocab,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Hybrid,
    Bow,
    Mvocab,
    Baseline,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with manifest, features, truth and split.
    Synth(SynthArgs),
    /// Randomly split a manifest into training and test images.
    Split(SplitArgs),
    /// Train the retrieval vocabulary on training images.
    TrainVocab(TrainVocabArgs),
    /// Quantize training images and build the inverted index.
    BuildIndex,
    /// Train the short-vector model and embed training images.
    TrainMvocab(TrainMvocabArgs),
    /// Fill manifest elevations from a DEM.
    Annotate(AnnotateArgs),
    /// Predict elevations for query images.
    Estimate(EstimateArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub places: Option<usize>,
    #[arg(long)]
    pub images_per_place: Option<usize>,
    #[arg(long)]
    pub features_per_image: Option<usize>,
    #[arg(long)]
    pub inlier_fraction: Option<f64>,
    #[arg(long)]
    pub descriptor_noise: Option<f64>,
    /// Test fraction of the written split.
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainVocabArgs {
    /// Vocabulary size.
    #[arg(long)]
    pub words: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainMvocabArgs {
    /// Words per vocabulary in the bank.
    #[arg(long)]
    pub words: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Scale components to unit variance.
    #[arg(long)]
    pub whiten: bool,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    /// ESRI ASCII grid.
    #[arg(long)]
    pub dem: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Manifest of query images (default: test images of --split, else all of --manifest).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hybrid")]
    pub method: MethodArg,
    #[arg(long)]
    pub reproj_tol: Option<f64>,
    #[arg(long)]
    pub shortlist: Option<usize>,
    /// Write per-query re-ranked lists and verification details (JSON lines).
    #[arg(long)]
    pub dump_verification: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Ground truth: a manifest, or a predictions-format CSV.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Also write plot-ready curve CSVs here.
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
    /// Error thresholds in meters, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub bin_width: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads.or(config.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(format!("cannot start {n} worker threads: {e}")))?;
    }
    let ctx = commands::Context { cli: &cli, config };
    match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Split(a) => commands::split(&ctx, a),
        Command::TrainVocab(a) => commands::train_vocab(&ctx, a),
        Command::BuildIndex => commands::build_index(&ctx),
        Command::TrainMvocab(a) => commands::train_mvocab(&ctx, a),
        Command::Annotate(a) => commands::annotate(&ctx, a),
        Command::Estimate(a) => commands::estimate(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ELEVEST_LOG", level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string();
            eprintln!("error: {message}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let cause = s.to_string();
                if !message.contains(&cause) {
                    eprintln!("  caused by: {cause}");
                }
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
