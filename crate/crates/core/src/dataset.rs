//! Rating-with-context ingestion, schema validation and seeded splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Raw value meaning "unknown" in CoMoDa-style exports.
pub const DEFAULT_MISSING_SENTINEL: i64 = -1;

const DEFAULT_SCHEMA_JSON: &str = include_str!("../data/comoda_schema.json");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {field} value {value} outside [{min}, {max}]")]
    OutOfRange {
        line: usize,
        field: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid schema JSON: {0}")]
    SchemaJson(#[from] serde_json::Error),
    #[error("dataset is empty")]
    Empty,
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One categorical context column and its integer range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextField {
    pub name: String,
    pub column: usize,
    pub min_value: i64,
    pub max_value: i64,
}

/// Column layout and value ranges of a ratings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSchema {
    pub user_column: usize,
    pub item_column: usize,
    pub rating_column: usize,
    pub max_rating: f64,
    #[serde(default = "default_sentinel")]
    pub missing_sentinel: i64,
    #[serde(default)]
    pub fields: Vec<ContextField>,
}

fn default_sentinel() -> i64 {
    DEFAULT_MISSING_SENTINEL
}

impl ContextSchema {
    /// CoMoDa layout: daytype, season, location, weather, end emotion and mood.
    pub fn comoda() -> Self {
        Self::from_json(DEFAULT_SCHEMA_JSON).expect("bundled schema is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rating.is_finite() && self.max_rating > 0.0) {
            return Err(DatasetError::Schema(format!(
                "max_rating must be positive, got {}",
                self.max_rating
            )));
        }
        let mut columns = HashSet::new();
        let mut names = HashSet::new();
        for (label, col) in [
            ("user", self.user_column),
            ("item", self.item_column),
            ("rating", self.rating_column),
        ]
        .into_iter()
        .chain(self.fields.iter().map(|f| (f.name.as_str(), f.column)))
        {
            if !columns.insert(col) {
                return Err(DatasetError::Schema(format!(
                    "column {col} ({label}) is used more than once"
                )));
            }
        }
        for f in &self.fields {
            if !names.insert(f.name.as_str()) {
                return Err(DatasetError::Schema(format!("duplicate field name {:?}", f.name)));
            }
            if f.min_value < 1 || f.max_value < f.min_value {
                return Err(DatasetError::Schema(format!(
                    "field {:?} needs 1 <= min_value <= max_value, got [{}, {}]",
                    f.name, f.min_value, f.max_value
                )));
            }
        }
        Ok(())
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&ContextField> {
        self.fields.iter().find(|f| f.name == name)
    }

    fn required_columns(&self) -> usize {
        self.fields
            .iter()
            .map(|f| f.column)
            .chain([self.user_column, self.item_column, self.rating_column])
            .max()
            .unwrap_or(0)
            + 1
    }
}

impl Default for ContextSchema {
    fn default() -> Self {
        Self::comoda()
    }
}

/// One observed rating. `context` is aligned with the schema's field order;
/// `None` marks a value that was missing in the source row.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub context: Vec<Option<i64>>,
}

/// Dense index over opaque identifiers, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> Self {
        let mut index = Self::default();
        for id in ids {
            index.intern(&id);
        }
        index
    }

    fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.lookup.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.lookup.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Immutable collection of ratings with shared id indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<RatingRecord>,
    users: Arc<IdIndex>,
    items: Arc<IdIndex>,
    schema: Arc<ContextSchema>,
    skipped_rows: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Field delimiter; detected from the first line when `None`.
    pub delimiter: Option<u8>,
}

/// Loads a delimiter-separated ratings file, detecting the delimiter.
pub fn load_dataset(path: &Path, schema: &ContextSchema) -> Result<Dataset> {
    load_dataset_with(path, schema, LoadOptions::default())
}

pub fn load_dataset_with(path: &Path, schema: &ContextSchema, options: LoadOptions) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::parse_str(&text, schema, options)
}

/// Picks the most frequent of comma, semicolon and tab on `line`.
pub fn detect_delimiter(line: &str) -> u8 {
    let mut best = (b',', 0usize);
    for &d in b",;\t" {
        let n = line.bytes().filter(|&b| b == d).count();
        if n > best.1 {
            best = (d, n);
        }
    }
    best.0
}

impl Dataset {
    pub fn parse_str(text: &str, schema: &ContextSchema, options: LoadOptions) -> Result<Self> {
        schema.validate()?;
        let first_line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        let delimiter = options.delimiter.unwrap_or_else(|| detect_delimiter(first_line));

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .delimiter(delimiter)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());

        let required = schema.required_columns();
        let mut users = IdIndex::default();
        let mut items = IdIndex::default();
        let mut records = Vec::new();
        let mut skipped_rows = 0;
        let mut expected_width: Option<usize> = None;
        let mut seen_first = false;

        for row in reader.records() {
            let row = row.map_err(|e| DatasetError::Malformed {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if row.iter().all(str::is_empty) {
                continue;
            }
            match expected_width {
                None => expected_width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(DatasetError::Malformed {
                        line,
                        message: format!("expected {w} columns, found {}", row.len()),
                    })
                }
                Some(_) => {}
            }
            if row.len() < required {
                return Err(DatasetError::Malformed {
                    line,
                    message: format!("schema needs at least {required} columns, found {}", row.len()),
                });
            }

            let is_first = !seen_first;
            seen_first = true;
            let rating_raw = &row[schema.rating_column];
            if rating_raw.is_empty() {
                skipped_rows += 1;
                continue;
            }
            let rating: f64 = match rating_raw.parse() {
                Ok(r) => r,
                // non-numeric rating on the first line marks a header
                Err(_) if is_first => continue,
                Err(_) => {
                    return Err(DatasetError::Malformed {
                        line,
                        message: format!("non-numeric rating {rating_raw:?}"),
                    })
                }
            };
            if rating == schema.missing_sentinel as f64 {
                skipped_rows += 1;
                continue;
            }
            if !(rating >= 1.0 && rating <= schema.max_rating) {
                return Err(DatasetError::OutOfRange {
                    line,
                    field: "rating".into(),
                    value: rating,
                    min: 1.0,
                    max: schema.max_rating,
                });
            }

            let mut context = Vec::with_capacity(schema.fields.len());
            for f in &schema.fields {
                let raw = &row[f.column];
                if raw.is_empty() {
                    context.push(None);
                    continue;
                }
                let value: i64 = raw.parse().map_err(|_| DatasetError::Malformed {
                    line,
                    message: format!("{} value {raw:?} is not an integer", f.name),
                })?;
                if value == schema.missing_sentinel {
                    context.push(None);
                } else if value < f.min_value || value > f.max_value {
                    return Err(DatasetError::OutOfRange {
                        line,
                        field: f.name.clone(),
                        value: value as f64,
                        min: f.min_value as f64,
                        max: f.max_value as f64,
                    });
                } else {
                    context.push(Some(value));
                }
            }

            let user = users.intern(&row[schema.user_column]);
            let item = items.intern(&row[schema.item_column]);
            records.push(RatingRecord {
                user,
                item,
                rating,
                context,
            });
        }

        Ok(Self {
            records,
            users: Arc::new(users),
            items: Arc::new(items),
            schema: Arc::new(schema.clone()),
            skipped_rows,
        })
    }

    /// Builds a dataset from already-indexed records.
    pub fn from_parts(
        records: Vec<RatingRecord>,
        users: IdIndex,
        items: IdIndex,
        schema: ContextSchema,
    ) -> Result<Self> {
        schema.validate()?;
        for (i, r) in records.iter().enumerate() {
            if r.user >= users.len() || r.item >= items.len() {
                return Err(DatasetError::Malformed {
                    line: i + 1,
                    message: "record index outside the id index".into(),
                });
            }
            if r.context.len() != schema.fields.len() {
                return Err(DatasetError::Malformed {
                    line: i + 1,
                    message: format!(
                        "record carries {} context values, schema declares {}",
                        r.context.len(),
                        schema.fields.len()
                    ),
                });
            }
        }
        Ok(Self {
            records,
            users: Arc::new(users),
            items: Arc::new(items),
            schema: Arc::new(schema),
            skipped_rows: 0,
        })
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn schema(&self) -> &ContextSchema {
        &self.schema
    }

    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn items(&self) -> &IdIndex {
        &self.items
    }

    /// Size of the shared user index (the model's `m`).
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Rows dropped because the rating was missing.
    pub fn skipped_rows(&self) -> usize {
        self.skipped_rows
    }

    pub fn context_value(&self, record: &RatingRecord, field: &str) -> Option<i64> {
        self.schema.field_index(field).and_then(|i| record.context[i])
    }

    fn with_records(&self, records: Vec<RatingRecord>) -> Self {
        Self {
            records,
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
            schema: Arc::clone(&self.schema),
            skipped_rows: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub records: usize,
    /// Rating value (as written by `Display`) to count.
    pub rating_histogram: BTreeMap<String, usize>,
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let users: HashSet<usize> = ds.records.iter().map(|r| r.user).collect();
    let items: HashSet<usize> = ds.records.iter().map(|r| r.item).collect();
    let mut rating_histogram = BTreeMap::new();
    for r in &ds.records {
        *rating_histogram.entry(r.rating.to_string()).or_insert(0) += 1;
    }
    DatasetStats {
        users: users.len(),
        items: items.len(),
        records: ds.records.len(),
        rating_histogram,
    }
}

/// Record-level holdout split. `round(N * test_fraction)` records go to the
/// test side; both sides keep source order and share the parent's indices.
pub fn split_train_test(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(test_fraction));
    }
    if ds.is_empty() {
        return Err(DatasetError::Empty);
    }
    let n = ds.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = ds
        .records
        .iter()
        .cloned()
        .zip(&is_test)
        .partition(|(_, &t)| t);
    Ok((
        ds.with_records(train.into_iter().map(|(r, _)| r).collect()),
        ds.with_records(test.into_iter().map(|(r, _)| r).collect()),
    ))
}
