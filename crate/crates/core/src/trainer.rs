//! Seeded stochastic gradient descent on the masked matrix-fitting loss,
//! and the learning-rate grid search built on it.
//!
//! Per-record loss for user `u`, item `i` and target `T` with mask `M`:
//!
//! ```text
//! l(U, V) = sum_{(r,c) in M} ((U^T V)[r][c] - T[r][c])^2 + lambda (|U|^2 + |V|^2)
//! ```
//!
//! With `E = U^T V - T` (zero outside `M`) the gradients are
//! `dl/dU = 2 V E^T + 2 lambda U` and `dl/dV = 2 U E + 2 lambda V`.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{split_train_test, Dataset, DatasetError};
use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::metrics::{self, MetricsError, MetricsReport, DEFAULT_TOP_K};
use crate::model::{init_model, FactorModel, ModelError, ModelVariant, TargetBuilder, TargetMatrix};
use crate::scalar::Scalar;

/// Any parameter with a larger magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const DEFAULT_LR_GRID: [f64; 5] = [0.001, 0.005, 0.01, 0.05, 0.1];
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_LATENT_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch} at record {record}: {detail}")]
    Diverged {
        epoch: usize,
        record: usize,
        detail: String,
    },
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl TrainError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub l2_lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle_each_epoch: bool,
    /// Stop after this many epochs without a lower training loss.
    #[serde(default)]
    pub patience: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: DEFAULT_EPOCHS,
            l2_lambda: 0.0,
            seed: 0,
            shuffle_each_epoch: true,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "l2_lambda must be non-negative, got {}",
                self.l2_lambda
            )));
        }
        if self.patience == Some(0) {
            return Err(TrainError::InvalidConfig("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    /// Total loss after each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    #[serde(skip)]
    pub wall_time: Duration,
    pub stopped_early: bool,
}

/// Records paired with their prebuilt targets.
#[derive(Debug, Clone)]
pub struct TrainingSet<T> {
    pub samples: Vec<Sample<T>>,
}

#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub user: usize,
    pub item: usize,
    pub target: TargetMatrix<T>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn build(ds: &Dataset, variant: ModelVariant) -> Result<Self> {
        let builder = TargetBuilder::new(variant, ds.schema())?;
        Ok(Self {
            samples: ds
                .records()
                .iter()
                .map(|r| Sample {
                    user: r.user,
                    item: r.item,
                    target: builder.build(r),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Summed masked squared error over `set`, plus `l2_lambda` times the
/// squared norm of all parameters.
pub fn loss_on<T: Scalar>(model: &FactorModel<T>, set: &TrainingSet<T>, l2_lambda: T) -> Result<T> {
    let mut acc = T::zero();
    for s in &set.samples {
        let p = model.predict_target(s.user, s.item)?;
        acc = acc + linalg::masked_frobenius_sq(&p, &s.target.values, &s.target.mask).map_err(ModelError::from)?;
    }
    if l2_lambda != T::zero() {
        acc = acc + l2_lambda * model.squared_norm();
    }
    Ok(acc)
}

pub fn loss<T: Scalar>(model: &FactorModel<T>, ds: &Dataset, l2_lambda: f64) -> Result<T> {
    check_coverage(model, ds)?;
    let set = TrainingSet::build(ds, model.variant())?;
    loss_on(model, &set, T::from_f64_lossy(l2_lambda))
}

/// Gradients of the per-record loss with respect to `U_user` and `V_item`.
pub fn gradients<T: Scalar>(
    model: &FactorModel<T>,
    user: usize,
    item: usize,
    target: &TargetMatrix<T>,
    l2_lambda: T,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    let u = model.user_factors(user)?;
    let v = model.item_factors(item)?;
    let p = linalg::matmul_transpose_left(u, v).map_err(ModelError::from)?;
    let e = linalg::masked_residual(&p, &target.values, &target.mask).map_err(ModelError::from)?;
    let v_et = linalg::matmul_transpose_right(v, &e).map_err(ModelError::from)?;
    let u_e = linalg::matmul(u, &e).map_err(ModelError::from)?;
    let two = T::two();
    let reg = two * l2_lambda;
    let grad_u = DenseMatrix::from_fn(u.rows(), u.cols(), |r, c| two * v_et.get(r, c) + reg * u.get(r, c))
        .map_err(ModelError::from)?;
    let grad_v = DenseMatrix::from_fn(v.rows(), v.cols(), |r, c| two * u_e.get(r, c) + reg * v.get(r, c))
        .map_err(ModelError::from)?;
    Ok((grad_u, grad_v))
}

/// Why a single step failed.
#[derive(Debug, Error)]
pub enum StepError {
    #[error("parameter became non-finite ({0})")]
    NonFinite(LinalgError),
    #[error("parameter magnitude {0:e} exceeds the divergence limit")]
    Exploded(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One simultaneous SGD update of `U_user` and `V_item` from a shared residual.
pub fn sgd_step<T: Scalar>(
    model: &mut FactorModel<T>,
    user: usize,
    item: usize,
    target: &TargetMatrix<T>,
    learning_rate: T,
    l2_lambda: T,
) -> std::result::Result<(), StepError> {
    let (grad_u, grad_v) = gradients(model, user, item, target, l2_lambda).map_err(|e| match e {
        TrainError::Model(ModelError::Linalg(l @ LinalgError::NonFinite { .. })) => StepError::NonFinite(l),
        TrainError::Model(m) => StepError::Model(m),
        other => StepError::Model(ModelError::InvalidDimension(other.to_string())),
    })?;
    let step = -learning_rate;
    let limit = T::from_f64_lossy(DIVERGENCE_LIMIT);
    let u = model.user_factors_mut(user)?;
    linalg::scaled_add_in_place(u, step, &grad_u).map_err(StepError::NonFinite)?;
    let u_max = u.max_abs();
    let v = model.item_factors_mut(item)?;
    linalg::scaled_add_in_place(v, step, &grad_v).map_err(StepError::NonFinite)?;
    let peak = u_max.max(v.max_abs());
    if peak > limit {
        return Err(StepError::Exploded(peak.to_f64_exact()));
    }
    Ok(())
}

fn check_coverage<T: Scalar>(model: &FactorModel<T>, ds: &Dataset) -> Result<()> {
    for r in ds.records() {
        model.user_factors(r.user)?;
        model.item_factors(r.item)?;
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs of SGD over `ds`.
///
/// The visit order is reshuffled every epoch from a generator seeded with
/// `cfg.seed` (or kept in dataset order when shuffling is off). Identical
/// inputs give bitwise-identical parameters and trace.
pub fn train<T: Scalar>(model: &mut FactorModel<T>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_coverage(model, ds)?;
    let set = TrainingSet::build(ds, model.variant())?;
    train_on(model, &set, cfg)
}

pub fn train_on<T: Scalar>(model: &mut FactorModel<T>, set: &TrainingSet<T>, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let lambda = T::from_f64_lossy(cfg.l2_lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        for &idx in &order {
            let s = &set.samples[idx];
            sgd_step(model, s.user, s.item, &s.target, lr, lambda).map_err(|e| TrainError::Diverged {
                epoch,
                record: idx,
                detail: e.to_string(),
            })?;
        }
        let l = loss_on(model, set, lambda)?.to_f64_exact();
        if !l.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                record: set.len().saturating_sub(1),
                detail: "loss became non-finite".into(),
            });
        }
        epoch_losses.push(l);
        if let Some(patience) = cfg.patience {
            if l < best {
                best = l;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    Ok(TrainTrace {
        final_loss: *epoch_losses.last().expect("at least one epoch"),
        epoch_losses,
        wall_time: start.elapsed(),
        stopped_early,
    })
}

/// Everything a grid point needs besides its learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub latent_dim: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub top_k: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            model_seed: 0,
            train: TrainConfig::default(),
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// A successfully trained and evaluated grid point.
#[derive(Debug, Clone)]
pub struct GridRun<T> {
    pub metrics: MetricsReport,
    pub trace: TrainTrace,
    pub model: FactorModel<T>,
}

#[derive(Debug)]
pub struct GridPoint<T> {
    pub learning_rate: f64,
    pub outcome: Result<GridRun<T>>,
}

impl<T> GridPoint<T> {
    pub fn run(&self) -> Option<&GridRun<T>> {
        self.outcome.as_ref().ok()
    }
}

#[derive(Debug)]
pub struct GridSearchResult<T> {
    pub variant: ModelVariant,
    /// One entry per grid value, in grid order.
    pub points: Vec<GridPoint<T>>,
    /// Index of the lowest test MAE; ties go to the smaller learning rate.
    pub best: Option<usize>,
}

impl<T> GridSearchResult<T> {
    pub fn best_point(&self) -> Option<&GridPoint<T>> {
        self.best.map(|i| &self.points[i])
    }
}

/// Splits `ds` and runs [`grid_search_on_split`].
pub fn grid_search<T: Scalar>(
    variant: ModelVariant,
    ds: &Dataset,
    lr_grid: &[f64],
    base: &GridConfig,
    test_fraction: f64,
    split_seed: u64,
) -> Result<GridSearchResult<T>> {
    let (train_ds, test_ds) = split_train_test(ds, test_fraction, split_seed)?;
    grid_search_on_split(variant, &train_ds, &test_ds, lr_grid, base)
}

/// Trains one fresh model per learning rate on `train_ds` and scores it on
/// `test_ds`. Points run in parallel; a failing point is recorded and does
/// not affect the others.
pub fn grid_search_on_split<T: Scalar>(
    variant: ModelVariant,
    train_ds: &Dataset,
    test_ds: &Dataset,
    lr_grid: &[f64],
    base: &GridConfig,
) -> Result<GridSearchResult<T>> {
    if lr_grid.is_empty() {
        return Err(TrainError::InvalidConfig("learning-rate grid is empty".into()));
    }
    if base.top_k == 0 {
        return Err(TrainError::InvalidConfig("top_k must be at least 1".into()));
    }
    for &lr in lr_grid {
        TrainConfig {
            learning_rate: lr,
            ..base.train.clone()
        }
        .validate()?;
    }
    if train_ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let set = TrainingSet::<T>::build(train_ds, variant)?;

    let points: Vec<GridPoint<T>> = lr_grid
        .par_iter()
        .map(|&lr| GridPoint {
            learning_rate: lr,
            outcome: run_point(variant, train_ds, test_ds, &set, lr, base),
        })
        .collect();

    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        let Some(run) = p.run() else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = points[b].run().expect("best is a success");
                let better = run.metrics.mae < cur.metrics.mae
                    || (run.metrics.mae == cur.metrics.mae && p.learning_rate < points[b].learning_rate);
                Some(if better { i } else { b })
            }
        };
    }
    Ok(GridSearchResult { variant, points, best })
}

fn run_point<T: Scalar>(
    variant: ModelVariant,
    train_ds: &Dataset,
    test_ds: &Dataset,
    set: &TrainingSet<T>,
    lr: f64,
    base: &GridConfig,
) -> Result<GridRun<T>> {
    let mut model = init_model::<T>(
        variant,
        base.latent_dim,
        train_ds.num_users(),
        train_ds.num_items(),
        base.model_seed,
        train_ds.schema().max_rating,
    )?;
    let cfg = TrainConfig {
        learning_rate: lr,
        ..base.train.clone()
    };
    let trace = train_on(&mut model, set, &cfg)?;
    let metrics = metrics::evaluate(&model, train_ds, test_ds, base.top_k)?;
    Ok(GridRun { metrics, trace, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ContextField, ContextSchema, IdIndex, RatingRecord};
    use crate::linalg::Mask;
    use rand::Rng;

    fn schema() -> ContextSchema {
        ContextSchema {
            user_column: 0,
            item_column: 1,
            rating_column: 2,
            max_rating: 5.0,
            missing_sentinel: -1,
            fields: vec![
                ContextField {
                    name: "location".into(),
                    column: 3,
                    min_value: 1,
                    max_value: 3,
                },
                ContextField {
                    name: "mood".into(),
                    column: 4,
                    min_value: 1,
                    max_value: 3,
                },
            ],
        }
    }

    fn random_dataset(users: usize, items: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|_| RatingRecord {
                user: rng.gen_range(0..users),
                item: rng.gen_range(0..items),
                rating: rng.gen_range(1..=5) as f64,
                context: vec![
                    Some(rng.gen_range(1..=3)),
                    if rng.gen_bool(0.8) { Some(rng.gen_range(1..=3)) } else { None },
                ],
            })
            .collect();
        Dataset::from_parts(
            records,
            IdIndex::from_ids((0..users).map(|u| format!("u{u}"))),
            IdIndex::from_ids((0..items).map(|i| format!("i{i}"))),
            schema(),
        )
        .unwrap()
    }

    fn random_target(k: usize, rng: &mut ChaCha8Rng) -> TargetMatrix<f64> {
        let values = DenseMatrix::from_fn(k, k, |_, _| rng.gen::<f64>()).unwrap();
        let mut mask = Mask::full(k, k);
        for r in 0..k {
            for c in 0..k {
                if r != c && rng.gen_bool(0.3) {
                    mask.set(r, c, false);
                }
            }
        }
        TargetMatrix { values, mask }
    }

    fn per_record_loss(model: &FactorModel<f64>, t: &TargetMatrix<f64>, lambda: f64) -> f64 {
        let p = model.predict_target(0, 0).unwrap();
        let fit = linalg::masked_frobenius_sq(&p, &t.values, &t.mask).unwrap();
        fit + lambda * (model.user_factors(0).unwrap().squared_norm() + model.item_factors(0).unwrap().squared_norm())
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { l2_lambda: -0.1, ..Default::default() },
            TrainConfig { patience: Some(0), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let h = 1e-6;
        for case in 0..100 {
            let variant = ModelVariant::ALL[case % 3];
            let k = variant.k();
            let f = rng.gen_range(1..=4);
            let lambda = if case % 2 == 0 { 0.0 } else { 0.05 };
            let model: FactorModel<f64> = init_model(variant, f, 1, 1, case as u64, 5.0).unwrap();
            let target = random_target(k, &mut rng);
            let (gu, gv) = gradients(&model, 0, 0, &target, lambda).unwrap();
            for which in 0..2 {
                for r in 0..f {
                    for c in 0..k {
                        let mut plus = model.clone();
                        let mut minus = model.clone();
                        let (pm, mm) = if which == 0 {
                            (plus.user_factors_mut(0).unwrap(), minus.user_factors_mut(0).unwrap())
                        } else {
                            (plus.item_factors_mut(0).unwrap(), minus.item_factors_mut(0).unwrap())
                        };
                        pm.set(r, c, pm.get(r, c) + h);
                        mm.set(r, c, mm.get(r, c) - h);
                        let fd = (per_record_loss(&plus, &target, lambda) - per_record_loss(&minus, &target, lambda)) / (2.0 * h);
                        let an = if which == 0 { gu.get(r, c) } else { gv.get(r, c) };
                        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                        assert!(rel < 1e-5, "case {case} which {which} ({r},{c}): {an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn masked_cells_never_affect_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let model: FactorModel<f64> = init_model(ModelVariant::MovieMatPlus, 3, 1, 1, rng.gen(), 5.0).unwrap();
            let t = random_target(3, &mut rng);
            let mut perturbed = t.clone();
            for r in 0..3 {
                for c in 0..3 {
                    if !t.mask.is_active(r, c) {
                        perturbed.values.set(r, c, rng.gen::<f64>() * 10.0);
                    }
                }
            }
            let mut a = model.clone();
            let mut b = model.clone();
            sgd_step(&mut a, 0, 0, &t, 0.05, 0.0).unwrap();
            sgd_step(&mut b, 0, 0, &perturbed, 0.05, 0.0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_residual_or_zero_rate_leaves_parameters() {
        let model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 1, 1, 3, 5.0).unwrap();
        let exact = TargetMatrix {
            values: model.predict_target(0, 0).unwrap(),
            mask: Mask::full(2, 2),
        };
        let mut m = model.clone();
        sgd_step(&mut m, 0, 0, &exact, 0.1, 0.0).unwrap();
        assert_eq!(m, model);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_target(2, &mut rng);
        let mut m = model.clone();
        sgd_step(&mut m, 0, 0, &t, 0.0, 0.0).unwrap();
        assert_eq!(m, model);
    }

    #[test]
    fn step_uses_pre_update_user_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 3, 1, 1, 9, 5.0).unwrap();
        let t = random_target(2, &mut rng);
        let (gu, gv) = gradients(&model, 0, 0, &t, 0.0).unwrap();
        let mut stepped = model.clone();
        sgd_step(&mut stepped, 0, 0, &t, 0.1, 0.0).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let u0 = model.user_factors(0).unwrap().get(r, c);
                let v0 = model.item_factors(0).unwrap().get(r, c);
                assert_eq!(stepped.user_factors(0).unwrap().get(r, c), u0 + -0.1 * gu.get(r, c));
                assert_eq!(stepped.item_factors(0).unwrap().get(r, c), v0 + -0.1 * gv.get(r, c));
            }
        }
    }

    #[test]
    fn explosion_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 1, 1, 1, 5.0).unwrap();
        let t = random_target(2, &mut rng);
        let mut failed = false;
        for _ in 0..200 {
            if sgd_step(&mut model, 0, 0, &t, 1e4, 0.0).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed);
    }

    #[test]
    fn loss_cases() {
        let ds = random_dataset(2, 2, 6, 5);
        let mut zero: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 2, 2, 0, 5.0).unwrap();
        for u in 0..2 {
            *zero.user_factors_mut(u).unwrap() = DenseMatrix::zeros(2, 2).unwrap();
        }
        // P = 0: loss is the sum of squared unmasked target cells
        let builder = TargetBuilder::new(ModelVariant::MovieMat, ds.schema()).unwrap();
        let mut want = 0.0;
        for r in ds.records() {
            let t: TargetMatrix<f64> = builder.build(r);
            for a in 0..2 {
                for b in 0..2 {
                    if t.mask.is_active(a, b) {
                        want += t.values.get(a, b).powi(2);
                    }
                }
            }
        }
        assert!((loss(&zero, &ds, 0.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_summation() {
        let ds = random_dataset(2, 2, 8, 6);
        let model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 2, 2, 8, 5.0).unwrap();
        let lambda = 0.3;
        let mut want = 0.0;
        for r in ds.records() {
            let u = model.user_factors(r.user).unwrap();
            let v = model.item_factors(r.item).unwrap();
            let diag = r.rating / 5.0;
            let cells = [
                (0, 0, Some(diag)),
                (1, 1, Some(diag)),
                (0, 1, r.context[0].map(|x| x as f64 / 3.0)),
                (1, 0, r.context[1].map(|x| x as f64 / 3.0)),
            ];
            for (a, b, t) in cells {
                if let Some(t) = t {
                    let p = u.get(0, a) * v.get(0, b) + u.get(1, a) * v.get(1, b);
                    want += (p - t) * (p - t);
                }
            }
        }
        let mut norm = 0.0;
        for m in model.all_user_factors().iter().chain(model.all_item_factors()) {
            norm += m.as_slice().iter().map(|x| x * x).sum::<f64>();
        }
        want += lambda * norm;
        assert!((loss(&model, &ds, lambda).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn exact_model_has_zero_loss() {
        let ds = random_dataset(1, 1, 1, 3);
        let builder = TargetBuilder::new(ModelVariant::MovieMat, ds.schema()).unwrap();
        let t: TargetMatrix<f64> = builder.build(&ds.records()[0]);
        let model = FactorModel::from_parts(
            ModelVariant::MovieMat,
            2,
            5.0,
            vec![DenseMatrix::identity(2).unwrap()],
            vec![t.values.clone()],
        )
        .unwrap();
        assert_eq!(loss(&model, &ds, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn loss_rejects_unknown_indices() {
        let ds = random_dataset(3, 3, 20, 1);
        let model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 1, 1, 0, 5.0).unwrap();
        assert!(matches!(loss(&model, &ds, 0.0), Err(TrainError::Model(ModelError::IndexOutOfRange { .. }))));
    }

    #[test]
    fn null_training_keeps_model() {
        let ds = random_dataset(3, 4, 10, 2);
        let mut model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 3, 4, 0, 5.0).unwrap();
        let before = model.clone();
        let initial = loss(&model, &ds, 0.0).unwrap();
        // a zero learning rate is rejected by validation, so drive the loop directly
        let set = TrainingSet::build(&ds, ModelVariant::MovieMat).unwrap();
        for s in &set.samples {
            sgd_step(&mut model, s.user, s.item, &s.target, 0.0, 0.0).unwrap();
        }
        assert_eq!(model, before);
        assert_eq!(loss_on(&model, &set, 0.0).unwrap(), initial);
        assert!(train(&mut model, &ds, &TrainConfig { epochs: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = random_dataset(6, 8, 40, 9);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            epochs: 15,
            seed: 5,
            ..Default::default()
        };
        let mut a: FactorModel<f64> = init_model(ModelVariant::MovieMat, 3, 6, 8, 1, 5.0).unwrap();
        let mut b = a.clone();
        let ta = train(&mut a, &ds, &cfg).unwrap();
        let tb = train(&mut b, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.epoch_losses, tb.epoch_losses);
        assert_eq!(ta.epoch_losses.len(), 15);
        assert!(ta.epoch_losses.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn patience_stops_early() {
        let ds = random_dataset(4, 4, 30, 11);
        let mut model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 4, 4, 1, 5.0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 500,
            patience: Some(2),
            ..Default::default()
        };
        match train(&mut model, &ds, &cfg) {
            Ok(trace) => assert!(trace.stopped_early && trace.epoch_losses.len() < 500),
            Err(e) => assert!(e.is_divergence()),
        }
    }

    #[test]
    fn grid_singleton_and_duplicates() {
        let ds = random_dataset(8, 10, 80, 12);
        let base = GridConfig {
            latent_dim: 2,
            train: TrainConfig { epochs: 5, ..Default::default() },
            top_k: 3,
            ..Default::default()
        };
        let one = grid_search::<f64>(ModelVariant::MovieMat, &ds, &[0.01], &base, 0.25, 3).unwrap();
        assert_eq!(one.points.len(), 1);
        assert_eq!(one.best, Some(0));

        let dup = grid_search::<f64>(ModelVariant::MovieMat, &ds, &[0.02, 0.01, 0.02], &base, 0.25, 3).unwrap();
        let m0 = &dup.points[0].run().unwrap().metrics;
        let m2 = &dup.points[2].run().unwrap().metrics;
        assert_eq!(m0, m2);
        // equal MAE at the duplicates: the tie must not move the best to a later equal entry
        assert_ne!(dup.best, Some(2));

        assert!(grid_search::<f64>(ModelVariant::MovieMat, &ds, &[], &base, 0.25, 3).is_err());
    }
}
