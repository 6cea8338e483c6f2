use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::config::{parse_delimiter, ExperimentConfig};
use super::{CliError, PredictArgs, StatsArgs, StorageArgs, StorageMode};
use crate::artifact::{ArtifactError, ModelArtifact};
use crate::dataset::{self, split_train_test, ContextSchema, Dataset, DatasetError, LoadOptions};
use crate::metrics::MetricsReport;
use crate::model::{FactorModel, ModelError, ModelVariant};
use crate::storage::{self, StorageError};
use crate::trainer::{grid_search_on_split, GridConfig, GridSearchResult, TrainConfig, TrainError};

const SPLIT_PROTOCOL: &str = "record-level random holdout";
const CANDIDATE_SET: &str = "all items except the user's training items";

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidFraction(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Divergence(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::Model(ModelError::MissingField(_)) => {
                CliError::Usage(e.to_string())
            }
            TrainError::Dataset(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<StorageError> for CliError {
    fn from(e: StorageError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("cannot write {}: {e}", path.display()))
}

fn stdout_err(e: impl std::fmt::Display) -> CliError {
    io_err(Path::new("<stdout>"), e)
}

fn load_schema(path: Option<&Path>) -> Result<ContextSchema, CliError> {
    match path {
        None => Ok(ContextSchema::comoda()),
        Some(p) => ContextSchema::from_path(p).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn load(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let schema = load_schema(cfg.schema.as_deref())?;
    let ds = dataset::load_dataset_with(
        &cfg.dataset,
        &schema,
        LoadOptions {
            delimiter: cfg.delimiter,
        },
    )?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("{} contains no ratings", cfg.dataset.display())));
    }
    Ok(ds)
}

fn grid_config(cfg: &ExperimentConfig) -> GridConfig {
    GridConfig {
        latent_dim: cfg.latent_dim,
        model_seed: cfg.seed,
        train: TrainConfig {
            learning_rate: cfg.lr_grid[0],
            epochs: cfg.epochs,
            l2_lambda: cfg.l2_lambda,
            seed: cfg.seed,
            shuffle_each_epoch: true,
            patience: None,
        },
        top_k: cfg.top_k,
    }
}

fn create_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_file(path, &text)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R], header: &[&str]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize)]
struct SplitInfo {
    protocol: &'static str,
    test_fraction: f64,
    split_seed: u64,
    train_records: usize,
    test_records: usize,
}

#[derive(Debug, Clone, Serialize)]
struct GridRow {
    variant: ModelVariant,
    learning_rate: f64,
    status: &'static str,
    best: bool,
    mae: Option<f64>,
    rmse: Option<f64>,
    dme: Option<f64>,
    final_loss: Option<f64>,
    error: Option<String>,
}

fn grid_rows(result: &GridSearchResult<f64>) -> Vec<GridRow> {
    result
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| match &p.outcome {
            Ok(run) => GridRow {
                variant: result.variant,
                learning_rate: p.learning_rate,
                status: "ok",
                best: result.best == Some(i),
                mae: Some(run.metrics.mae),
                rmse: Some(run.metrics.rmse),
                dme: run.metrics.dme,
                final_loss: Some(run.trace.final_loss),
                error: None,
            },
            Err(e) => failed_row(result.variant, p.learning_rate, e),
        })
        .collect()
}

fn failed_row(variant: ModelVariant, lr: f64, e: &TrainError) -> GridRow {
    GridRow {
        variant,
        learning_rate: lr,
        status: if e.is_divergence() { "diverged" } else { "failed" },
        best: false,
        mae: None,
        rmse: None,
        dme: None,
        final_loss: None,
        error: Some(e.to_string()),
    }
}

#[derive(Serialize)]
struct TraceRow<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<&'a str>,
    lr: f64,
    epoch: usize,
    loss: f64,
}

fn trace_rows(result: &GridSearchResult<f64>, with_variant: bool) -> Vec<TraceRow<'static>> {
    let mut rows = Vec::new();
    for p in &result.points {
        if let Some(run) = p.run() {
            for (epoch, &loss) in run.trace.epoch_losses.iter().enumerate() {
                rows.push(TraceRow {
                    variant: with_variant.then(|| result.variant.name()),
                    lr: p.learning_rate,
                    epoch: epoch + 1,
                    loss,
                });
            }
        }
    }
    rows
}

#[derive(Serialize)]
struct TrainReport<'a> {
    variant: ModelVariant,
    learning_rate: f64,
    metrics: &'a MetricsReport,
    latent_dim: usize,
    epochs: usize,
    l2_lambda: f64,
    model_seed: u64,
    split: SplitInfo,
    candidate_set: &'static str,
    grid: Vec<GridRow>,
}

fn all_failed(result: &GridSearchResult<f64>) -> CliError {
    let first = result.points.iter().find_map(|p| p.outcome.as_ref().err());
    let every_divergence = result
        .points
        .iter()
        .all(|p| p.outcome.as_ref().err().is_some_and(TrainError::is_divergence));
    let detail = first.map_or_else(String::new, ToString::to_string);
    let msg = format!("every grid point failed for {}: {detail}", result.variant);
    if every_divergence {
        CliError::Divergence(msg)
    } else {
        CliError::Data(msg)
    }
}

/// Grid-searches one variant, keeps the best-MAE model and writes
/// `model.json`, `trace.csv` and `metrics.json` to the output directory.
pub fn cmd_train(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let [variant] = cfg.variants[..] else {
        return Err(CliError::Usage("train takes exactly one --variant".into()));
    };
    let ds = load(cfg)?;
    let (train_ds, test_ds) = split_train_test(&ds, cfg.test_fraction, cfg.split_seed)?;
    let result = grid_search_on_split::<f64>(variant, &train_ds, &test_ds, &cfg.lr_grid, &grid_config(cfg))?;
    let best = result.best_point().ok_or_else(|| all_failed(&result))?;
    let run = best.run().expect("best point succeeded");

    create_out_dir(&cfg.out)?;
    let artifact = ModelArtifact::from_model(&run.model, ds.schema(), ds.users(), ds.items())?;
    artifact.save(&cfg.out.join("model.json"))?;
    write_csv(&cfg.out.join("trace.csv"), &trace_rows(&result, false), &["lr", "epoch", "loss"])?;
    let report = TrainReport {
        variant,
        learning_rate: best.learning_rate,
        metrics: &run.metrics,
        latent_dim: cfg.latent_dim,
        epochs: cfg.epochs,
        l2_lambda: cfg.l2_lambda,
        model_seed: cfg.seed,
        split: SplitInfo {
            protocol: SPLIT_PROTOCOL,
            test_fraction: cfg.test_fraction,
            split_seed: cfg.split_seed,
            train_records: train_ds.len(),
            test_records: test_ds.len(),
        },
        candidate_set: CANDIDATE_SET,
        grid: grid_rows(&result),
    };
    write_json(&cfg.out.join("metrics.json"), &report)?;

    for row in &report.grid {
        match row.mae {
            Some(mae) => writeln!(
                stdout,
                "{} lr={} MAE={mae:.4} DME={}{}",
                variant.display_name(),
                row.learning_rate,
                row.dme.map_or_else(|| "undefined".to_owned(), |d| format!("{d:.4}")),
                if row.best { "  (best)" } else { "" }
            ),
            _ => writeln!(
                stdout,
                "{} lr={} {}",
                variant.display_name(),
                row.learning_rate,
                row.status
            ),
        }
        .map_err(stdout_err)?;
    }
    writeln!(stdout, "artifacts written to {}", cfg.out.display()).map_err(stdout_err)?;
    Ok(())
}

#[derive(Serialize)]
struct FigureRow {
    variant: ModelVariant,
    lr: f64,
    mae: Option<f64>,
    dme: Option<f64>,
}

#[derive(Serialize)]
struct MetricRow {
    variant: ModelVariant,
    lr: f64,
    value: Option<f64>,
}

#[derive(Serialize)]
struct ComparisonReport<'a> {
    split: SplitInfo,
    candidate_set: &'static str,
    dme_definition: &'static str,
    config: &'a ExperimentConfig,
    rows: &'a [GridRow],
}

/// Runs the grid for every configured variant on one shared split and writes
/// the comparison table, figure CSVs and per-epoch traces.
pub fn cmd_compare(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    if cfg.variants.len() < 2 {
        return Err(CliError::Usage("compare needs at least two variants".into()));
    }
    let ds = load(cfg)?;
    let (train_ds, test_ds) = split_train_test(&ds, cfg.test_fraction, cfg.split_seed)?;
    let base = grid_config(cfg);

    let mut rows: Vec<GridRow> = Vec::new();
    let mut traces = Vec::new();
    for &variant in &cfg.variants {
        match grid_search_on_split::<f64>(variant, &train_ds, &test_ds, &cfg.lr_grid, &base) {
            Ok(result) => {
                rows.extend(grid_rows(&result));
                traces.extend(trace_rows(&result, true));
            }
            Err(e) => rows.extend(cfg.lr_grid.iter().map(|&lr| failed_row(variant, lr, &e))),
        }
    }
    if rows.iter().all(|r| r.status != "ok") {
        let all_diverged = rows.iter().all(|r| r.status == "diverged");
        let msg = format!(
            "no variant produced a result: {}",
            rows[0].error.as_deref().unwrap_or("unknown error")
        );
        return Err(if all_diverged { CliError::Divergence(msg) } else { CliError::Data(msg) });
    }

    create_out_dir(&cfg.out)?;
    let figure: Vec<FigureRow> = rows
        .iter()
        .map(|r| FigureRow {
            variant: r.variant,
            lr: r.learning_rate,
            mae: r.mae,
            dme: r.dme,
        })
        .collect();
    write_csv(&cfg.out.join("figure.csv"), &figure, &["variant", "lr", "mae", "dme"])?;
    for (name, pick) in [
        ("mae", (|r: &GridRow| r.mae) as fn(&GridRow) -> Option<f64>),
        ("dme", |r: &GridRow| r.dme),
    ] {
        let series: Vec<MetricRow> = rows
            .iter()
            .map(|r| MetricRow {
                variant: r.variant,
                lr: r.learning_rate,
                value: pick(r),
            })
            .collect();
        write_csv(&cfg.out.join(format!("figure_{name}.csv")), &series, &["variant", "lr", name])?;
    }
    write_csv(
        &cfg.out.join("comparison.csv"),
        &rows,
        &["variant", "lr", "status", "best", "mae", "rmse", "dme", "final_loss", "error"],
    )?;
    write_csv(&cfg.out.join("traces.csv"), &traces, &["variant", "lr", "epoch", "loss"])?;
    write_json(
        &cfg.out.join("comparison.json"),
        &ComparisonReport {
            split: SplitInfo {
                protocol: SPLIT_PROTOCOL,
                test_fraction: cfg.test_fraction,
                split_seed: cfg.split_seed,
                train_records: train_ds.len(),
                test_records: test_ds.len(),
            },
            candidate_set: CANDIDATE_SET,
            dme_definition: crate::metrics::DME_DEFINITION,
            config: cfg,
            rows: &rows,
        },
    )?;

    writeln!(stdout, "{:<14} {:>8} {:>8} {:>8}  note", "variant", "lr", "MAE", "DME").map_err(stdout_err)?;
    for r in &rows {
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
        let note = if r.best { "best" } else if r.status != "ok" { r.status } else { "" };
        writeln!(
            stdout,
            "{:<14} {:>8} {:>8} {:>8}  {note}",
            r.variant.display_name(),
            r.learning_rate,
            fmt(r.mae),
            fmt(r.dme)
        )
        .map_err(stdout_err)?;
    }
    writeln!(stdout, "figure data written to {}", cfg.out.display()).map_err(stdout_err)?;
    Ok(())
}

#[derive(Serialize)]
struct ContextEstimate {
    field: String,
    estimate: f64,
    observed: Option<i64>,
}

#[derive(Serialize)]
struct Prediction {
    user: String,
    item: String,
    variant: ModelVariant,
    rating: f64,
    context: Vec<ContextEstimate>,
}

/// Predicts the rating and every layout context field for one known pair.
pub fn cmd_predict(args: &PredictArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let artifact = ModelArtifact::load(&args.model)?;
    let model: FactorModel<f64> = artifact.to_model()?;
    let user = artifact
        .users()
        .get(&args.user)
        .ok_or_else(|| CliError::Data(format!("unknown user id {:?}", args.user)))?;
    let item = artifact
        .items()
        .get(&args.item)
        .ok_or_else(|| CliError::Data(format!("unknown item id {:?}", args.item)))?;

    let mut observed = Vec::new();
    for pair in &args.context {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--context expects NAME=VALUE, got {pair:?}")))?;
        if model.variant().layout_cell(name).is_none() {
            return Err(CliError::Usage(format!(
                "context field {name:?} is not estimated by {}",
                model.variant()
            )));
        }
        let value: i64 = value
            .parse()
            .map_err(|_| CliError::Usage(format!("context value {value:?} is not an integer")))?;
        observed.push((name.to_owned(), value));
    }

    let rating = model.predict_rating(user, item).map_err(|e| CliError::Data(e.to_string()))?;
    let mut context = Vec::new();
    for cell in model.variant().layout() {
        let estimate = model
            .predict_context(user, item, cell.field, &artifact.schema)
            .map_err(|e| CliError::Data(e.to_string()))?;
        context.push(ContextEstimate {
            field: cell.field.to_owned(),
            estimate,
            observed: observed.iter().find(|(n, _)| n == cell.field).map(|(_, v)| *v),
        });
    }
    let prediction = Prediction {
        user: args.user.clone(),
        item: args.item.clone(),
        variant: model.variant(),
        rating,
        context,
    };

    if args.json {
        let text = serde_json::to_string_pretty(&prediction).map_err(stdout_err)?;
        writeln!(stdout, "{text}").map_err(stdout_err)?;
        return Ok(());
    }
    writeln!(stdout, "rating: {:.4}", prediction.rating).map_err(stdout_err)?;
    for c in &prediction.context {
        match c.observed {
            Some(o) => writeln!(stdout, "{}: {:.4} (observed {o})", c.field, c.estimate),
            None => writeln!(stdout, "{}: {:.4}", c.field, c.estimate),
        }
        .map_err(stdout_err)?;
    }
    Ok(())
}

/// Prints the byte count and binary-unit size for tensor or target storage.
pub fn cmd_storage_estimate(args: &StorageArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let est = match args.mode {
        StorageMode::Tensor => {
            if args.dims.is_empty() {
                return Err(CliError::Usage("tensor mode needs --dims".into()));
            }
            storage::tensor_bytes(&args.dims, args.bytes_per_value)?
        }
        StorageMode::Matmat => {
            let (Some(k), Some(n)) = (args.k, args.records) else {
                return Err(CliError::Usage("matmat mode needs --k and --records".into()));
            };
            storage::matmat_bytes(k, n, args.bytes_per_value)?
        }
    };
    if args.json {
        let text = serde_json::to_string(&est).map_err(stdout_err)?;
        writeln!(stdout, "{text}").map_err(stdout_err)
    } else {
        writeln!(stdout, "{} bytes ({})", est.bytes, est.human).map_err(stdout_err)
    }
}

#[derive(Serialize)]
struct StatsReport {
    #[serde(flatten)]
    stats: dataset::DatasetStats,
    skipped_rows: usize,
}

/// Prints user/item/record counts and the rating histogram as JSON.
pub fn cmd_stats(args: &StatsArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let schema = load_schema(args.schema.as_deref())?;
    let delimiter = args.delimiter.as_deref().map(parse_delimiter).transpose()?;
    let ds = dataset::load_dataset_with(&args.dataset, &schema, LoadOptions { delimiter })?;
    let report = StatsReport {
        stats: dataset::dataset_stats(&ds),
        skipped_rows: ds.skipped_rows(),
    };
    let text = serde_json::to_string_pretty(&report).map_err(stdout_err)?;
    writeln!(stdout, "{text}").map_err(stdout_err)?;
    if let Some(path) = &args.out {
        write_file(path, &format!("{text}\n"))?;
    }
    Ok(())
}
