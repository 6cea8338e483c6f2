//! Accuracy (MAE, RMSE) and popularity-concentration (Degree of Matthew
//! Effect) metrics over a held-out split.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{FactorModel, ModelError};
use crate::scalar::Scalar;

/// Human-readable definition written into every report.
pub const DME_DEFINITION: &str = "DME = -slope of the least-squares line through (ln popularity_rank, \
ln recommendation_count) over items recommended at least once; popularity rank 1 = most rated in \
train (ties by item index); each evaluated user is recommended the top_k items by predicted score \
among items absent from that user's training ratings (ties by item index)";

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and truth lengths differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no values to score")]
    Empty,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("matthew-effect slope undefined: only {0} item(s) were recommended")]
    DegenerateRegression(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when fewer than two distinct items were recommended.
    pub dme: Option<f64>,
    pub top_k: usize,
    pub n_eval: usize,
    pub dme_definition: String,
}

fn check_lengths<T>(pred: &[T], truth: &[T]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mae<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    check_lengths(pred, truth)?;
    let mut acc = T::zero();
    for (&p, &t) in pred.iter().zip(truth) {
        acc = acc + (p - t).abs();
    }
    Ok(acc / T::from_usize(pred.len()).expect("length fits"))
}

pub fn rmse<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    check_lengths(pred, truth)?;
    let mut acc = T::zero();
    for (&p, &t) in pred.iter().zip(truth) {
        let d = p - t;
        acc = acc + d * d;
    }
    Ok((acc / T::from_usize(pred.len()).expect("length fits")).sqrt())
}

/// 1-based popularity rank of every item in the index: most training
/// ratings first, ties by smaller item index.
pub fn popularity_ranks(train: &Dataset) -> Vec<usize> {
    let n = train.num_items();
    let mut counts = vec![0usize; n];
    for r in train.records() {
        counts[r.item] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; n];
    for (pos, item) in order.into_iter().enumerate() {
        ranks[item] = pos + 1;
    }
    ranks
}

/// Slope of the ordinary least-squares line through `points`.
pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for &(x, y) in points {
        sxy += (x - mean_x) * (y - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
    }
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// DME from per-item popularity ranks and recommendation counts.
pub fn dme_from_counts(ranks: &[usize], counts: &[usize]) -> Result<f64> {
    let points: Vec<(f64, f64)> = ranks
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&r, &c)| ((r as f64).ln(), (c as f64).ln()))
        .collect();
    let slope = least_squares_slope(&points).ok_or(MetricsError::DegenerateRegression(points.len()))?;
    // -0.0 for a flat fit reads oddly in reports
    Ok(if slope == 0.0 { 0.0 } else { -slope })
}

/// Per-item count of appearances in each user's top-`top_k` list.
///
/// Candidates for a user are all items without a training rating from that
/// user. `score` is only compared, never interpreted.
pub fn recommendation_counts<E>(
    train: &Dataset,
    eval_users: &[usize],
    top_k: usize,
    mut score: impl FnMut(usize, usize) -> std::result::Result<f64, E>,
) -> std::result::Result<Vec<usize>, E> {
    let n = train.num_items();
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); train.num_users()];
    for r in train.records() {
        seen[r.user].insert(r.item);
    }
    let mut counts = vec![0usize; n];
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &user in eval_users {
        scored.clear();
        for item in 0..n {
            if seen.get(user).is_some_and(|s| s.contains(&item)) {
                continue;
            }
            scored.push((score(user, item)?, item));
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        for &(_, item) in scored.iter().take(top_k) {
            counts[item] += 1;
        }
    }
    Ok(counts)
}

/// DME of an arbitrary scorer.
pub fn degree_of_matthew_effect_with(
    train: &Dataset,
    eval_users: &[usize],
    top_k: usize,
    score: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<f64> {
    if top_k == 0 {
        return Err(MetricsError::InvalidTopK);
    }
    let counts = recommendation_counts(train, eval_users, top_k, score)?;
    dme_from_counts(&popularity_ranks(train), &counts)
}

/// DME of a factor model, ranking by the unclamped rating score.
pub fn degree_of_matthew_effect<T: Scalar>(
    model: &FactorModel<T>,
    train: &Dataset,
    eval_users: &[usize],
    top_k: usize,
) -> Result<f64> {
    degree_of_matthew_effect_with(train, eval_users, top_k, |u, i| {
        Ok(model.predict_score(u, i)?.to_f64_exact())
    })
}

/// MAE/RMSE of clamped predictions on `test` plus DME for the users in `test`.
pub fn evaluate<T: Scalar>(
    model: &FactorModel<T>,
    train: &Dataset,
    test: &Dataset,
    top_k: usize,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut pred = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for r in test.records() {
        pred.push(model.predict_rating(r.user, r.item)?);
        truth.push(T::from_f64_lossy(r.rating));
    }
    let eval_users: Vec<usize> = test
        .records()
        .iter()
        .map(|r| r.user)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(MetricsReport {
        mae: mae(&pred, &truth)?.to_f64_exact(),
        rmse: rmse(&pred, &truth)?.to_f64_exact(),
        dme: match degree_of_matthew_effect(model, train, &eval_users, top_k) {
            Ok(d) => Some(d),
            Err(MetricsError::DegenerateRegression(_)) => None,
            Err(e) => return Err(e),
        },
        top_k,
        n_eval: pred.len(),
        dme_definition: DME_DEFINITION.to_owned(),
    })
}
