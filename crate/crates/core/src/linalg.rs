//! Dense row-major kernels for the small `f x k` factor matrices and the
//! `k x k` targets they are fitted to.
//!
//! Every accumulation runs in a fixed order (row-major, inner index
//! ascending) so identical inputs give bitwise-identical outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch ({left_rows}x{left_cols} vs {right_rows}x{right_cols})")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix must have at least one row and one column, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} entries for the given shape, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("{op}: non-finite entry at ({row}, {col})")]
    NonFinite {
        op: &'static str,
        row: usize,
        col: usize,
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_shape(rows, cols)?;
        Ok(Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        })
    }

    pub fn identity(size: usize) -> Result<Self> {
        let mut m = Self::zeros(size, size)?;
        for i in 0..size {
            m.data[i * size + i] = T::one();
        }
        Ok(m)
    }

    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_shape(rows, cols)?;
        if data.len() != rows * cols {
            return Err(LinalgError::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        let m = Self { rows, cols, data };
        m.check_finite("from_row_major")?;
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        check_shape(rows, cols)?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_row_major(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    /// Sets one entry. Finiteness is the caller's responsibility here; it is
    /// re-checked by the arithmetic kernels.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn diagonal(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.rows.min(self.cols)).map(move |i| self.get(i, i))
    }

    pub fn squared_norm(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc = acc + x * x;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(LinalgError::NonFinite {
                op,
                row: pos / self.cols,
                col: pos % self.cols,
            }),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(mismatch(op, self, other));
        }
        Ok(())
    }
}

/// Cell selection for a `k x k` target; `true` cells enter the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![true; rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        check_shape(rows, cols)?;
        if cells.len() != rows * cols {
            return Err(LinalgError::LengthMismatch {
                expected: rows * cols,
                actual: cells.len(),
            });
        }
        Ok(Self { rows, cols, cells })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_active(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, active: bool) {
        self.cells[row * self.cols + col] = active;
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(|&c| c)
    }

    pub fn active_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// `A^T * B` for two `f x k` matrices, giving `k x k`:
/// `out[r][c] = sum_t A[t][r] * B[t][c]`.
pub fn matmul_transpose_left<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.rows != b.rows {
        return Err(mismatch("matmul_transpose_left", a, b));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols)?;
    for r in 0..a.cols {
        for c in 0..b.cols {
            let mut acc = T::zero();
            for t in 0..a.rows {
                acc = acc + a.get(t, r) * b.get(t, c);
            }
            out.data[r * b.cols + c] = acc;
        }
    }
    out.check_finite("matmul_transpose_left")?;
    Ok(out)
}

/// `A * B` for `A: p x q`, `B: q x s`.
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols)?;
    for r in 0..a.rows {
        for c in 0..b.cols {
            let mut acc = T::zero();
            for t in 0..a.cols {
                acc = acc + a.get(r, t) * b.get(t, c);
            }
            out.data[r * b.cols + c] = acc;
        }
    }
    out.check_finite("matmul")?;
    Ok(out)
}

/// `A * B^T` for `A: p x q`, `B: s x q`.
pub fn matmul_transpose_right<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.cols {
        return Err(mismatch("matmul_transpose_right", a, b));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows)?;
    for r in 0..a.rows {
        for c in 0..b.rows {
            let mut acc = T::zero();
            for t in 0..a.cols {
                acc = acc + a.get(r, t) * b.get(c, t);
            }
            out.data[r * b.rows + c] = acc;
        }
    }
    out.check_finite("matmul_transpose_right")?;
    Ok(out)
}

/// `P - T` with masked-out cells set to zero.
pub fn masked_residual<T: Scalar>(
    predicted: &DenseMatrix<T>,
    target: &DenseMatrix<T>,
    mask: &Mask,
) -> Result<DenseMatrix<T>> {
    predicted.same_shape(target, "masked_residual")?;
    check_mask(predicted, mask, "masked_residual")?;
    let mut out = DenseMatrix::zeros(predicted.rows, predicted.cols)?;
    for (i, slot) in out.data.iter_mut().enumerate() {
        if mask.cells[i] {
            *slot = predicted.data[i] - target.data[i];
        }
    }
    Ok(out)
}

/// Sum of `(P - T)^2` over the active cells of `mask`.
pub fn masked_frobenius_sq<T: Scalar>(
    predicted: &DenseMatrix<T>,
    target: &DenseMatrix<T>,
    mask: &Mask,
) -> Result<T> {
    predicted.same_shape(target, "masked_frobenius_sq")?;
    check_mask(predicted, mask, "masked_frobenius_sq")?;
    let mut acc = T::zero();
    for i in 0..predicted.data.len() {
        if mask.cells[i] {
            let d = predicted.data[i] - target.data[i];
            acc = acc + d * d;
        }
    }
    Ok(acc)
}

/// `A <- A + alpha * G`. On a non-finite result `A` is left untouched.
pub fn scaled_add_in_place<T: Scalar>(a: &mut DenseMatrix<T>, alpha: T, g: &DenseMatrix<T>) -> Result<()> {
    a.same_shape(g, "scaled_add_in_place")?;
    let updated: Vec<T> = a
        .data
        .iter()
        .zip(&g.data)
        .map(|(&x, &d)| x + alpha * d)
        .collect();
    if let Some(pos) = updated.iter().position(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite {
            op: "scaled_add_in_place",
            row: pos / a.cols,
            col: pos % a.cols,
        });
    }
    a.data = updated;
    Ok(())
}

fn check_shape(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(LinalgError::EmptyShape { rows, cols });
    }
    Ok(())
}

fn check_mask<T: Scalar>(m: &DenseMatrix<T>, mask: &Mask, op: &'static str) -> Result<()> {
    if m.shape() != mask.shape() {
        return Err(LinalgError::DimensionMismatch {
            op,
            left_rows: m.rows,
            left_cols: m.cols,
            right_rows: mask.rows,
            right_cols: mask.cols,
        });
    }
    Ok(())
}

fn mismatch<T>(op: &'static str, a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> LinalgError {
    LinalgError::DimensionMismatch {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}
