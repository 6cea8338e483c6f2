//! `moviemat` command line: train, compare, predict, storage-estimate, stats.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training divergence.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::model::ModelVariant;

pub use commands::{cmd_compare, cmd_predict, cmd_stats, cmd_storage_estimate, cmd_train};
pub use config::{ConfigFile, ExperimentConfig, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Divergence(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "moviemat", version, about = "Context-aware recommendation by matrix fitting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grid-search one variant, keep the best model and write its artifacts.
    Train(ExperimentArgs),
    /// Grid-search several variants on one split and emit figure data.
    Compare(ExperimentArgs),
    /// Predict a rating and context values from a saved model.
    Predict(PredictArgs),
    /// Estimate input storage for a dense tensor or for k x k targets.
    StorageEstimate(StorageArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// JSON experiment configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Schema JSON; the bundled CoMoDa schema is used when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Field delimiter (comma, semicolon, tab or a single character).
    #[arg(long)]
    pub delimiter: Option<String>,
    /// Variant(s); `compare` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub variant: Option<Vec<ModelVariant>>,
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub l2_lambda: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Model initialization and shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentArgs {
    pub fn resolve(&self, default_variants: &[ModelVariant]) -> Result<ExperimentConfig, CliError> {
        let file = self.config.as_deref().map(ConfigFile::load).transpose()?;
        let flags = Overrides {
            dataset: self.dataset.clone(),
            schema: self.schema.clone(),
            delimiter: self.delimiter.clone(),
            variants: self.variant.clone(),
            latent_dim: self.latent_dim,
            epochs: self.epochs,
            lr_grid: self.lr_grid.clone(),
            l2_lambda: self.l2_lambda,
            seed: self.seed,
            split_seed: self.split_seed,
            test_fraction: self.test_fraction,
            top_k: self.top_k,
            out: self.out.clone(),
        };
        config::resolve(file, flags, default_variants)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub user: String,
    #[arg(long)]
    pub item: String,
    /// Observed context `name=value`, printed next to the model's estimate.
    #[arg(long = "context", value_name = "NAME=VALUE")]
    pub context: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StorageMode {
    Tensor,
    Matmat,
}

#[derive(Debug, Clone, Args)]
pub struct StorageArgs {
    #[arg(long, value_enum)]
    pub mode: StorageMode,
    /// Tensor dimensions, e.g. 610,9724,610,9724,3.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<u64>,
    /// Target side length (matmat mode).
    #[arg(long)]
    pub k: Option<u64>,
    /// Number of ratings (matmat mode).
    #[arg(long)]
    pub records: Option<u64>,
    #[arg(long, default_value_t = 4)]
    pub bytes_per_value: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub delimiter: Option<String>,
    /// Also write the statistics to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl clap::ValueEnum for ModelVariant {
    fn value_variants<'a>() -> &'a [Self] {
        &Self::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(&args.resolve(&[ModelVariant::MovieMat])?, stdout),
        Command::Compare(args) => cmd_compare(&args.resolve(&ModelVariant::ALL)?, stdout),
        Command::Predict(args) => cmd_predict(&args, stdout),
        Command::StorageEstimate(args) => cmd_storage_estimate(&args, stdout),
        Command::Stats(args) => cmd_stats(&args, stdout),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
