//! Context-aware recommendation by matrix fitting.
//!
//! Every observed rating is expanded into a small square target whose
//! diagonal repeats the normalized rating and whose off-diagonal cells carry
//! normalized context (location, mood, weather, ...). Users and items own
//! `f x k` feature matrices fitted to those targets by seeded SGD. The
//! classic matrix-factorization baseline is the `k = 1` case.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the CLI uses.

pub mod artifact;
pub mod cli;
pub mod dataset;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod storage;
pub mod trainer;

pub use dataset::{
    dataset_stats, load_dataset, split_train_test, ContextField, ContextSchema, Dataset, RatingRecord,
};
pub use metrics::{evaluate, MetricsReport};
pub use model::{build_target, init_model, ModelVariant};
pub use scalar::Scalar;
pub use trainer::{grid_search, train, GridConfig, TrainConfig, TrainTrace};

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Model = model::FactorModel<f64>;
pub type Model32 = model::FactorModel<f32>;
pub type Target = model::TargetMatrix<f64>;
pub type GridResult = trainer::GridSearchResult<f64>;
