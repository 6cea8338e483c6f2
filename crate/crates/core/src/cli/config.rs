use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::metrics::DEFAULT_TOP_K;
use crate::model::ModelVariant;
use crate::trainer::{DEFAULT_EPOCHS, DEFAULT_LATENT_DIM, DEFAULT_LR_GRID};

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Experiment settings as read from `--config`. Every field is optional;
/// command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub delimiter: Option<String>,
    pub variant: Option<ModelVariant>,
    pub variants: Option<Vec<ModelVariant>>,
    pub latent_dim: Option<usize>,
    pub epochs: Option<usize>,
    pub lr_grid: Option<Vec<f64>>,
    pub l2_lambda: Option<f64>,
    pub seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub test_fraction: Option<f64>,
    pub top_k: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// `None` selects the bundled CoMoDa schema.
    pub schema: Option<PathBuf>,
    pub delimiter: Option<u8>,
    pub variants: Vec<ModelVariant>,
    pub latent_dim: usize,
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub l2_lambda: f64,
    pub seed: u64,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub top_k: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        if self.latent_dim == 0 {
            return bad("--latent-dim must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("--epochs must be at least 1".into());
        }
        if self.lr_grid.is_empty() {
            return bad("--lr-grid must name at least one learning rate".into());
        }
        if let Some(lr) = self.lr_grid.iter().find(|&&lr| !(lr.is_finite() && lr > 0.0)) {
            return bad(format!("learning rates must be positive, got {lr}"));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return bad(format!("--l2-lambda must be non-negative, got {}", self.l2_lambda));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "--test-fraction must lie strictly between 0 and 1, got {}",
                self.test_fraction
            ));
        }
        if self.top_k == 0 {
            return bad("--top-k must be at least 1".into());
        }
        Ok(())
    }
}

/// Flag values that may override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub delimiter: Option<String>,
    pub variants: Option<Vec<ModelVariant>>,
    pub latent_dim: Option<usize>,
    pub epochs: Option<usize>,
    pub lr_grid: Option<Vec<f64>>,
    pub l2_lambda: Option<f64>,
    pub seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub test_fraction: Option<f64>,
    pub top_k: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn parse_delimiter(raw: &str) -> Result<u8, CliError> {
    match raw {
        "," | "comma" => Ok(b','),
        ";" | "semicolon" => Ok(b';'),
        "\t" | "\\t" | "tab" => Ok(b'\t'),
        s if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        other => Err(CliError::Usage(format!("unsupported delimiter {other:?}"))),
    }
}

/// Merges flags over the config file over built-in defaults.
pub fn resolve(
    file: Option<ConfigFile>,
    flags: Overrides,
    default_variants: &[ModelVariant],
) -> Result<ExperimentConfig, CliError> {
    let file = file.unwrap_or_default();
    let file_variants = file.variants.or(file.variant.map(|v| vec![v]));
    let dataset = flags
        .dataset
        .or(file.dataset)
        .ok_or_else(|| CliError::Usage("no dataset given (use --dataset or the config's \"dataset\")".into()))?;
    let delimiter = flags
        .delimiter
        .or(file.delimiter)
        .map(|d| parse_delimiter(&d))
        .transpose()?;
    let cfg = ExperimentConfig {
        dataset,
        schema: flags.schema.or(file.schema),
        delimiter,
        variants: flags
            .variants
            .or(file_variants)
            .unwrap_or_else(|| default_variants.to_vec()),
        latent_dim: flags.latent_dim.or(file.latent_dim).unwrap_or(DEFAULT_LATENT_DIM),
        epochs: flags.epochs.or(file.epochs).unwrap_or(DEFAULT_EPOCHS),
        lr_grid: flags
            .lr_grid
            .or(file.lr_grid)
            .unwrap_or_else(|| DEFAULT_LR_GRID.to_vec()),
        l2_lambda: flags.l2_lambda.or(file.l2_lambda).unwrap_or(0.0),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        split_seed: flags.split_seed.or(file.split_seed).unwrap_or(0),
        test_fraction: flags
            .test_fraction
            .or(file.test_fraction)
            .unwrap_or(DEFAULT_TEST_FRACTION),
        top_k: flags.top_k.or(file.top_k).unwrap_or(DEFAULT_TOP_K),
        out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
    };
    cfg.validate()?;
    Ok(cfg)
}
