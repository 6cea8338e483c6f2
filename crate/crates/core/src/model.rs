//! Target submatrices, latent factor parameters and prediction.
//!
//! Each observation `(user, item, rating, context)` becomes a `k x k` target
//! whose diagonal replicates `rating / max_rating` and whose off-diagonal
//! cells hold normalized context values. A user and an item each own an
//! `f x k` feature matrix; their fit to the target is `U^T * V`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ContextSchema, RatingRecord};
use crate::linalg::{self, DenseMatrix, LinalgError, Mask};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layout references context field {0:?}, which the schema does not declare")]
    MissingField(String),
    #[error("context field {0:?} is not part of this variant's layout")]
    FieldNotInLayout(String),
    #[error("{kind} index {index} out of range (model has {len})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    InvalidDimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which target construction a model fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Plain matrix factorization: a `1 x 1` target holding the rating.
    #[serde(rename = "classic")]
    ClassicMf,
    /// `2 x 2` target with location and mood.
    #[serde(rename = "moviemat")]
    MovieMat,
    /// `3 x 3` target with daytype, season, weather, location, emotion, mood.
    #[serde(rename = "moviemat-plus")]
    MovieMatPlus,
}

/// Off-diagonal cell and the context field it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutCell {
    pub row: usize,
    pub col: usize,
    pub field: &'static str,
}

const fn cell(row: usize, col: usize, field: &'static str) -> LayoutCell {
    LayoutCell { row, col, field }
}

const MOVIEMAT_LAYOUT: [LayoutCell; 2] = [cell(0, 1, "location"), cell(1, 0, "mood")];

const MOVIEMAT_PLUS_LAYOUT: [LayoutCell; 6] = [
    cell(0, 1, "daytype"),
    cell(0, 2, "season"),
    cell(1, 0, "weather"),
    cell(1, 2, "location"),
    cell(2, 0, "emotion"),
    cell(2, 1, "mood"),
];

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [Self::ClassicMf, Self::MovieMat, Self::MovieMatPlus];

    /// Side length of the target submatrix.
    pub fn k(self) -> usize {
        match self {
            Self::ClassicMf => 1,
            Self::MovieMat => 2,
            Self::MovieMatPlus => 3,
        }
    }

    pub fn layout(self) -> &'static [LayoutCell] {
        match self {
            Self::ClassicMf => &[],
            Self::MovieMat => &MOVIEMAT_LAYOUT,
            Self::MovieMatPlus => &MOVIEMAT_PLUS_LAYOUT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ClassicMf => "classic",
            Self::MovieMat => "moviemat",
            Self::MovieMatPlus => "moviemat-plus",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::ClassicMf => "ClassicMF",
            Self::MovieMat => "MovieMat",
            Self::MovieMatPlus => "MovieMat+",
        }
    }

    pub fn layout_cell(self, field: &str) -> Option<LayoutCell> {
        self.layout().iter().copied().find(|c| c.field == field)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "classic" | "classicmf" | "mf" => Ok(Self::ClassicMf),
            "moviemat" => Ok(Self::MovieMat),
            "moviemat-plus" | "moviemat+" | "moviematplus" => Ok(Self::MovieMatPlus),
            other => Err(format!(
                "unknown variant {other:?} (expected classic, moviemat or moviemat-plus)"
            )),
        }
    }
}

/// A `k x k` fitting target with its loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix<T> {
    pub values: DenseMatrix<T>,
    pub mask: Mask,
}

/// Layout resolved against a schema, reusable across records.
#[derive(Debug, Clone)]
pub struct TargetBuilder {
    variant: ModelVariant,
    max_rating: f64,
    // (row, col, index into record.context, field max)
    cells: Vec<(usize, usize, usize, f64)>,
}

impl TargetBuilder {
    pub fn new(variant: ModelVariant, schema: &ContextSchema) -> Result<Self> {
        let cells = variant
            .layout()
            .iter()
            .map(|c| {
                let idx = schema
                    .field_index(c.field)
                    .ok_or_else(|| ModelError::MissingField(c.field.to_owned()))?;
                Ok((c.row, c.col, idx, schema.fields[idx].max_value as f64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            variant,
            max_rating: schema.max_rating,
            cells,
        })
    }

    pub fn build<T: Scalar>(&self, record: &RatingRecord) -> TargetMatrix<T> {
        let k = self.variant.k();
        let diag = T::from_f64_lossy(record.rating / self.max_rating);
        let mut values = DenseMatrix::zeros(k, k).expect("k >= 1");
        let mut mask = Mask::full(k, k);
        for i in 0..k {
            values.set(i, i, diag);
        }
        for &(row, col, idx, max) in &self.cells {
            match record.context.get(idx).copied().flatten() {
                Some(v) => values.set(row, col, T::from_f64_lossy(v as f64 / max)),
                None => mask.set(row, col, false),
            }
        }
        TargetMatrix { values, mask }
    }
}

/// Builds the fitting target for one record.
pub fn build_target<T: Scalar>(
    record: &RatingRecord,
    variant: ModelVariant,
    schema: &ContextSchema,
) -> Result<TargetMatrix<T>> {
    Ok(TargetBuilder::new(variant, schema)?.build(record))
}

/// Per-user and per-item `f x k` feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<T> {
    variant: ModelVariant,
    latent_dim: usize,
    max_rating: T,
    pub(crate) users: Vec<DenseMatrix<T>>,
    pub(crate) items: Vec<DenseMatrix<T>>,
}

/// Draws every parameter independently from `U[0, 1/sqrt(f)]`.
///
/// User matrices are drawn first (in index order, row-major), then items.
pub fn init_model<T: Scalar>(
    variant: ModelVariant,
    latent_dim: usize,
    num_users: usize,
    num_items: usize,
    seed: u64,
    max_rating: f64,
) -> Result<FactorModel<T>> {
    if latent_dim == 0 || num_users == 0 || num_items == 0 {
        return Err(ModelError::InvalidDimension(format!(
            "latent dimension, user count and item count must be positive \
             (got f={latent_dim}, m={num_users}, n={num_items})"
        )));
    }
    if !(max_rating.is_finite() && max_rating > 0.0) {
        return Err(ModelError::InvalidDimension(format!(
            "max_rating must be positive, got {max_rating}"
        )));
    }
    let k = variant.k();
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> Result<Vec<DenseMatrix<T>>> {
        (0..count)
            .map(|_| {
                DenseMatrix::from_fn(latent_dim, k, |_, _| {
                    T::from_f64_lossy(rng.gen::<f64>() * scale)
                })
                .map_err(ModelError::from)
            })
            .collect()
    };
    let users = draw(num_users)?;
    let items = draw(num_items)?;
    Ok(FactorModel {
        variant,
        latent_dim,
        max_rating: T::from_f64_lossy(max_rating),
        users,
        items,
    })
}

impl<T: Scalar> FactorModel<T> {
    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        variant: ModelVariant,
        latent_dim: usize,
        max_rating: T,
        users: Vec<DenseMatrix<T>>,
        items: Vec<DenseMatrix<T>>,
    ) -> Result<Self> {
        let k = variant.k();
        if latent_dim == 0 || users.is_empty() || items.is_empty() {
            return Err(ModelError::InvalidDimension(
                "model needs f >= 1 and at least one user and item".into(),
            ));
        }
        if let Some(bad) = users.iter().chain(&items).find(|m| m.shape() != (latent_dim, k)) {
            return Err(ModelError::InvalidDimension(format!(
                "expected {latent_dim}x{k} factor matrices, found {}x{}",
                bad.rows(),
                bad.cols()
            )));
        }
        if !(max_rating.is_finite() && max_rating > T::zero()) {
            return Err(ModelError::InvalidDimension("max_rating must be positive".into()));
        }
        Ok(Self {
            variant,
            latent_dim,
            max_rating,
            users,
            items,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn k(&self) -> usize {
        self.variant.k()
    }

    pub fn max_rating(&self) -> T {
        self.max_rating
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Total number of stored parameters, `(m + n) * f * k`.
    pub fn parameter_count(&self) -> usize {
        (self.users.len() + self.items.len()) * self.latent_dim * self.k()
    }

    pub fn user_factors(&self, user: usize) -> Result<&DenseMatrix<T>> {
        self.users.get(user).ok_or(ModelError::IndexOutOfRange {
            kind: "user",
            index: user,
            len: self.users.len(),
        })
    }

    pub fn item_factors(&self, item: usize) -> Result<&DenseMatrix<T>> {
        self.items.get(item).ok_or(ModelError::IndexOutOfRange {
            kind: "item",
            index: item,
            len: self.items.len(),
        })
    }

    pub fn user_factors_mut(&mut self, user: usize) -> Result<&mut DenseMatrix<T>> {
        let len = self.users.len();
        self.users.get_mut(user).ok_or(ModelError::IndexOutOfRange {
            kind: "user",
            index: user,
            len,
        })
    }

    pub fn item_factors_mut(&mut self, item: usize) -> Result<&mut DenseMatrix<T>> {
        let len = self.items.len();
        self.items.get_mut(item).ok_or(ModelError::IndexOutOfRange {
            kind: "item",
            index: item,
            len,
        })
    }

    pub fn all_user_factors(&self) -> &[DenseMatrix<T>] {
        &self.users
    }

    pub fn all_item_factors(&self) -> &[DenseMatrix<T>] {
        &self.items
    }

    /// Sum of squared entries over all parameters.
    pub fn squared_norm(&self) -> T {
        let mut acc = T::zero();
        for m in self.users.iter().chain(&self.items) {
            acc = acc + m.squared_norm();
        }
        acc
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> T {
        self.users
            .iter()
            .chain(&self.items)
            .fold(T::zero(), |m, x| m.max(x.max_abs()))
    }

    /// `U_user^T * V_item`.
    pub fn predict_target(&self, user: usize, item: usize) -> Result<DenseMatrix<T>> {
        let u = self.user_factors(user)?;
        let v = self.item_factors(item)?;
        Ok(linalg::matmul_transpose_left(u, v)?)
    }

    /// Unclamped rating score: mean of the predicted diagonal times `max_rating`.
    pub fn predict_score(&self, user: usize, item: usize) -> Result<T> {
        let p = self.predict_target(user, item)?;
        Ok(diagonal_mean(&p) * self.max_rating)
    }

    /// Rating estimate clamped to `[1, max_rating]`.
    pub fn predict_rating(&self, user: usize, item: usize) -> Result<T> {
        Ok(self.clamp_rating(self.predict_score(user, item)?))
    }

    pub fn clamp_rating(&self, score: T) -> T {
        score.max(T::one()).min(self.max_rating)
    }

    /// Estimated value of a context field, de-normalized and clamped to the
    /// field's declared range.
    pub fn predict_context(
        &self,
        user: usize,
        item: usize,
        field: &str,
        schema: &ContextSchema,
    ) -> Result<T> {
        let cell = self
            .variant
            .layout_cell(field)
            .ok_or_else(|| ModelError::FieldNotInLayout(field.to_owned()))?;
        let spec = schema
            .field(field)
            .ok_or_else(|| ModelError::MissingField(field.to_owned()))?;
        let p = self.predict_target(user, item)?;
        let lo = T::from_f64_lossy(spec.min_value as f64);
        let hi = T::from_f64_lossy(spec.max_value as f64);
        Ok((p.get(cell.row, cell.col) * hi).max(lo).min(hi))
    }
}

/// Mean of the diagonal of a square matrix; the rating read-out rule.
pub fn diagonal_mean<T: Scalar>(m: &DenseMatrix<T>) -> T {
    let k = m.rows().min(m.cols());
    let mut acc = T::zero();
    for d in m.diagonal() {
        acc = acc + d;
    }
    acc / T::from_usize(k).expect("small k")
}
