//! Synthetic data shared by the integration suites.

#![allow(dead_code)]

use moviemat::dataset::{ContextSchema, Dataset, IdIndex, RatingRecord};
use moviemat::linalg::DenseMatrix;
use moviemat::linalg::Mask;
use moviemat::model::{FactorModel, ModelVariant, TargetMatrix};
use moviemat::trainer::{Sample, TrainingSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn comoda_schema() -> ContextSchema {
    ContextSchema::comoda()
}

/// Ratings whose context fields are driven by the same per-user and
/// per-item effects that shift the rating, at CoMoDa-like sparsity.
pub struct ContextSignal {
    pub users: usize,
    pub items: usize,
    pub records: usize,
    /// Zipf-like exponent of item popularity.
    pub item_skew: f64,
    pub noise: f64,
}

impl Default for ContextSignal {
    fn default() -> Self {
        Self {
            users: 121,
            items: 1232,
            records: 2296,
            item_skew: 0.8,
            noise: 0.5,
        }
    }
}

fn level(x: f64, max: i64) -> i64 {
    // map a real score onto 1..=max
    let max_f = max as f64;
    (((x + 1.0) / 2.0 * max_f).floor() as i64 + 1).clamp(1, max)
}

impl ContextSignal {
    pub fn generate(&self, seed: u64) -> Dataset {
        let schema = comoda_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let user_bias: Vec<f64> = (0..self.users).map(|_| 0.6 * normal.sample(&mut rng)).collect();
        let item_bias: Vec<f64> = (0..self.items).map(|_| 0.6 * normal.sample(&mut rng)).collect();
        let weights: Vec<f64> = (1..=self.items).map(|r| (r as f64).powf(-self.item_skew)).collect();
        let total: f64 = weights.iter().sum();
        let pick_item = |rng: &mut ChaCha8Rng| {
            let mut x = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                x -= w;
                if x <= 0.0 {
                    return i;
                }
            }
            weights.len() - 1
        };
        let mut records = Vec::with_capacity(self.records);
        for n in 0..self.records {
            // every user appears at least once
            let user = if n < self.users { n } else { rng.gen_range(0..self.users) };
            let item = pick_item(&mut rng);
            let (a, b) = (user_bias[user], item_bias[item]);
            let rating = (3.5 + a + b + self.noise * normal.sample(&mut rng)).round().clamp(1.0, 5.0);
            let jitter = |rng: &mut ChaCha8Rng| 0.3 * normal.sample(rng);
            let fields = &schema.fields;
            let mut context = vec![None; fields.len()];
            for (idx, f) in fields.iter().enumerate() {
                let signal = match f.name.as_str() {
                    "mood" | "emotion" => a + jitter(&mut rng),
                    "location" | "weather" => b + jitter(&mut rng),
                    _ => 0.5 * (a + b) + jitter(&mut rng),
                };
                context[idx] = Some(level(signal, f.max_value));
            }
            records.push(RatingRecord { user, item, rating, context });
        }
        Dataset::from_parts(
            records,
            IdIndex::from_ids((0..self.users).map(|u| format!("u{u}"))),
            IdIndex::from_ids((0..self.items).map(|i| format!("m{i}"))),
            schema,
        )
        .unwrap()
    }
}

/// Targets produced by a hidden factor model, so an exact fit exists.
pub struct Factorizable {
    pub variant: ModelVariant,
    pub latent_dim: usize,
    pub users: usize,
    pub items: usize,
    pub observed: usize,
}

pub struct FactorizableData {
    pub truth: FactorModel<f64>,
    pub train: TrainingSet<f64>,
    pub test: TrainingSet<f64>,
}

impl Factorizable {
    pub fn generate(&self, seed: u64, test_fraction: f64) -> FactorizableData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.variant.k();
        // entries in [0.3, 1] / sqrt(f) keep every product in [0, 1] while
        // spreading read-out ratings over most of the scale
        let scale = 1.0 / (self.latent_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<DenseMatrix<f64>> {
            (0..n)
                .map(|_| DenseMatrix::from_fn(self.latent_dim, k, |_, _| (0.3 + 0.7 * rng.gen::<f64>()) * scale).unwrap())
                .collect()
        };
        let users = draw(self.users);
        let items = draw(self.items);
        let truth = FactorModel::from_parts(self.variant, self.latent_dim, 5.0, users, items).unwrap();

        let mut pairs: Vec<(usize, usize)> = (0..self.users)
            .flat_map(|u| (0..self.items).map(move |i| (u, i)))
            .collect();
        pairs.shuffle(&mut rng);
        pairs.truncate(self.observed);
        let n_test = (self.observed as f64 * test_fraction).round() as usize;
        let sample = |&(user, item): &(usize, usize)| Sample {
            user,
            item,
            target: TargetMatrix {
                values: truth.predict_target(user, item).unwrap(),
                mask: Mask::full(k, k),
            },
        };
        let test = TrainingSet { samples: pairs[..n_test].iter().map(sample).collect() };
        let train = TrainingSet { samples: pairs[n_test..].iter().map(sample).collect() };
        FactorizableData { truth, train, test }
    }
}

/// MAE between clamped read-outs of the model and of the hidden truth.
pub fn readout_mae(model: &FactorModel<f64>, truth: &FactorModel<f64>, set: &TrainingSet<f64>) -> f64 {
    let pred: Vec<f64> = set.samples.iter().map(|s| model.predict_rating(s.user, s.item).unwrap()).collect();
    let want: Vec<f64> = set.samples.iter().map(|s| truth.predict_rating(s.user, s.item).unwrap()).collect();
    moviemat::metrics::mae(&pred, &want).unwrap()
}

/// Writes `ds` as a semicolon-separated file in the bundled schema's layout.
pub fn write_comoda_csv(ds: &Dataset, path: &std::path::Path) {
    let schema = ds.schema();
    let width = schema.fields.iter().map(|f| f.column).max().unwrap().max(schema.rating_column) + 1;
    let mut out = String::new();
    let mut header = vec!["x".to_owned(); width];
    header[schema.user_column] = "userID".into();
    header[schema.item_column] = "itemID".into();
    header[schema.rating_column] = "rating".into();
    for f in &schema.fields {
        header[f.column] = f.name.clone();
    }
    out += &header.join(";");
    out.push('\n');
    for r in ds.records() {
        let mut row = vec!["0".to_owned(); width];
        row[schema.user_column] = ds.users().id(r.user).unwrap().to_owned();
        row[schema.item_column] = ds.items().id(r.item).unwrap().to_owned();
        row[schema.rating_column] = r.rating.to_string();
        for (f, v) in schema.fields.iter().zip(&r.context) {
            row[f.column] = v.unwrap_or(schema.missing_sentinel).to_string();
        }
        out += &row.join(";");
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}
