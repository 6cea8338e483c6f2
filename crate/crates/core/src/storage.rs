//! Input-storage arithmetic: a dense context tensor versus per-rating
//! `k x k` target matrices.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("dimensions must be positive")]
    NonPositive,
    #[error("at least one dimension is required")]
    NoDimensions,
    #[error("byte count overflows 128-bit arithmetic")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StorageEstimate {
    pub bytes: u128,
    pub human: String,
}

impl StorageEstimate {
    fn new(bytes: u128) -> Self {
        Self {
            bytes,
            human: human_readable(bytes),
        }
    }
}

/// Bytes to store a dense tensor with the given dimensions.
pub fn tensor_bytes(dims: &[u64], bytes_per_value: u64) -> Result<StorageEstimate, StorageError> {
    if dims.is_empty() {
        return Err(StorageError::NoDimensions);
    }
    if bytes_per_value == 0 || dims.contains(&0) {
        return Err(StorageError::NonPositive);
    }
    let bytes = dims
        .iter()
        .try_fold(u128::from(bytes_per_value), |acc, &d| acc.checked_mul(u128::from(d)))
        .ok_or(StorageError::Overflow)?;
    Ok(StorageEstimate::new(bytes))
}

/// Bytes to store `records` targets of size `k x k`: `k^2 * N * bytes`.
pub fn matmat_bytes(k: u64, records: u64, bytes_per_value: u64) -> Result<StorageEstimate, StorageError> {
    if k == 0 || records == 0 || bytes_per_value == 0 {
        return Err(StorageError::NonPositive);
    }
    let k = u128::from(k);
    let bytes = k
        .checked_mul(k)
        .and_then(|x| x.checked_mul(u128::from(records)))
        .and_then(|x| x.checked_mul(u128::from(bytes_per_value)))
        .ok_or(StorageError::Overflow)?;
    Ok(StorageEstimate::new(bytes))
}

const UNITS: [&str; 9] = ["B", "KB", "MB", "GB", "TB", "PB", "EB", "ZB", "YB"];

/// Binary-unit rendering (1 KB = 1024 B) with one decimal place.
pub fn human_readable(bytes: u128) -> String {
    let mut value = bytes as f64;
    let mut unit = 0;
    while value >= 1024.0 && unit + 1 < UNITS.len() {
        value /= 1024.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{bytes} B")
    } else {
        format!("{value:.1} {}", UNITS[unit])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn movielens_tensor() {
        let est = tensor_bytes(&[610, 9724, 610, 9724, 3], 4).unwrap();
        assert_eq!(est.bytes, 422_212_237_075_200);
        assert_eq!(est.human, "384.0 TB");
    }

    #[test]
    fn matmat_comoda_scale() {
        assert_eq!(matmat_bytes(2, 2296, 8).unwrap().bytes, 73_472);
    }

    #[test]
    fn human_units() {
        assert_eq!(human_readable(0), "0 B");
        assert_eq!(human_readable(1023), "1023 B");
        assert_eq!(human_readable(1024), "1.0 KB");
        assert_eq!(human_readable(73_472), "71.8 KB");
        assert_eq!(human_readable(1 << 30), "1.0 GB");
    }

    #[test]
    fn errors() {
        assert_eq!(tensor_bytes(&[], 4), Err(StorageError::NoDimensions));
        assert_eq!(tensor_bytes(&[3, 0], 4), Err(StorageError::NonPositive));
        assert_eq!(tensor_bytes(&[3], 0), Err(StorageError::NonPositive));
        assert_eq!(matmat_bytes(0, 1, 1), Err(StorageError::NonPositive));
        assert_eq!(tensor_bytes(&[u64::MAX, u64::MAX, 2], 1), Err(StorageError::Overflow));
    }

    proptest! {
        #[test]
        fn doubling_a_dimension_doubles_bytes(dims in prop::collection::vec(1u64..100_000, 1..6), which in any::<prop::sample::Index>()) {
            let base = tensor_bytes(&dims, 4).unwrap().bytes;
            let mut doubled = dims.clone();
            let i = which.index(dims.len());
            doubled[i] *= 2;
            prop_assert_eq!(tensor_bytes(&doubled, 4).unwrap().bytes, 2 * base);
        }
    }
}
