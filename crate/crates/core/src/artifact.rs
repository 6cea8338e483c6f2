//! Versioned JSON encoding of a trained model.
//!
//! Parameters are written as `f64` in shortest round-trip decimal form, so
//! decoding reproduces every bit of an `f64` or `f32` model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ContextSchema, IdIndex};
use crate::linalg::DenseMatrix;
use crate::model::{FactorModel, ModelError, ModelVariant};
use crate::scalar::Scalar;

pub const FORMAT_NAME: &str = "matmat-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("inconsistent model artifact: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    pub variant: ModelVariant,
    pub latent_dim: usize,
    pub k: usize,
    pub max_rating: f64,
    pub schema: ContextSchema,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// One row-major `f x k` block per user.
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
}

impl ModelArtifact {
    pub fn from_model<T: Scalar>(
        model: &FactorModel<T>,
        schema: &ContextSchema,
        users: &IdIndex,
        items: &IdIndex,
    ) -> Result<Self, ArtifactError> {
        if users.len() != model.num_users() || items.len() != model.num_items() {
            return Err(ArtifactError::Inconsistent(format!(
                "model has {}x{} users/items but the indices hold {}x{}",
                model.num_users(),
                model.num_items(),
                users.len(),
                items.len()
            )));
        }
        let flatten = |ms: &[DenseMatrix<T>]| -> Vec<Vec<f64>> {
            ms.iter()
                .map(|m| m.as_slice().iter().map(|x| x.to_f64_exact()).collect())
                .collect()
        };
        Ok(Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            variant: model.variant(),
            latent_dim: model.latent_dim(),
            k: model.k(),
            max_rating: model.max_rating().to_f64_exact(),
            schema: schema.clone(),
            user_ids: users.ids().to_vec(),
            item_ids: items.ids().to_vec(),
            user_factors: flatten(model.all_user_factors()),
            item_factors: flatten(model.all_item_factors()),
        })
    }

    pub fn to_model<T: Scalar>(&self) -> Result<FactorModel<T>, ArtifactError> {
        if self.format != FORMAT_NAME || self.version != FORMAT_VERSION {
            return Err(ArtifactError::Version {
                format: self.format.clone(),
                version: self.version,
            });
        }
        if self.k != self.variant.k() {
            return Err(ArtifactError::Inconsistent(format!(
                "k = {} does not match variant {}",
                self.k, self.variant
            )));
        }
        if self.user_ids.len() != self.user_factors.len() || self.item_ids.len() != self.item_factors.len() {
            return Err(ArtifactError::Inconsistent("id and factor counts differ".into()));
        }
        let build = |blocks: &[Vec<f64>]| -> Result<Vec<DenseMatrix<T>>, ArtifactError> {
            blocks
                .iter()
                .map(|b| {
                    let data = b.iter().map(|&x| T::from_f64_lossy(x)).collect();
                    DenseMatrix::from_row_major(self.latent_dim, self.k, data)
                        .map_err(|e| ArtifactError::Model(e.into()))
                })
                .collect()
        };
        Ok(FactorModel::from_parts(
            self.variant,
            self.latent_dim,
            T::from_f64_lossy(self.max_rating),
            build(&self.user_factors)?,
            build(&self.item_factors)?,
        )?)
    }

    pub fn users(&self) -> IdIndex {
        IdIndex::from_ids(self.user_ids.iter().cloned())
    }

    pub fn items(&self) -> IdIndex {
        IdIndex::from_ids(self.item_ids.iter().cloned())
    }

    pub fn to_json(&self) -> Result<String, ArtifactError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ArtifactError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        fs::write(path, self.to_json()?).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;

    fn ids(prefix: &str, n: usize) -> IdIndex {
        IdIndex::from_ids((0..n).map(|i| format!("{prefix}{i}")))
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), f in 1usize..5, variant_idx in 0usize..3) {
            let variant = ModelVariant::ALL[variant_idx];
            let model: FactorModel<f64> = init_model(variant, f, 3, 4, seed, 5.0).unwrap();
            let schema = ContextSchema::comoda();
            let art = ModelArtifact::from_model(&model, &schema, &ids("u", 3), &ids("i", 4)).unwrap();
            let back = ModelArtifact::from_json(&art.to_json().unwrap()).unwrap();
            prop_assert_eq!(&back, &art);
            let decoded: FactorModel<f64> = back.to_model().unwrap();
            for (a, b) in model.all_user_factors().iter().chain(model.all_item_factors())
                .zip(decoded.all_user_factors().iter().chain(decoded.all_item_factors()))
            {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn single_precision_round_trip() {
        let model: FactorModel<f32> = init_model(ModelVariant::MovieMat, 3, 2, 2, 17, 5.0).unwrap();
        let art = ModelArtifact::from_model(&model, &ContextSchema::comoda(), &ids("u", 2), &ids("i", 2)).unwrap();
        let decoded: FactorModel<f32> = ModelArtifact::from_json(&art.to_json().unwrap()).unwrap().to_model().unwrap();
        assert_eq!(decoded, model);
    }

    #[test]
    fn rejects_wrong_version_and_shapes() {
        let model: FactorModel<f64> = init_model(ModelVariant::MovieMat, 2, 1, 1, 0, 5.0).unwrap();
        let mut art = ModelArtifact::from_model(&model, &ContextSchema::comoda(), &ids("u", 1), &ids("i", 1)).unwrap();
        art.version = 99;
        assert!(matches!(art.to_model::<f64>(), Err(ArtifactError::Version { .. })));
        art.version = FORMAT_VERSION;
        art.k = 3;
        assert!(matches!(art.to_model::<f64>(), Err(ArtifactError::Inconsistent(_))));
        art.k = 2;
        art.user_factors[0].pop();
        assert!(art.to_model::<f64>().is_err());
        assert!(ModelArtifact::from_model(&model, &ContextSchema::comoda(), &ids("u", 2), &ids("i", 1)).is_err());
    }
}
