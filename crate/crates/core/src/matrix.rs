//! Minimal row-major matrix used for weights and sample batches.
//!
//! Deliberately small: the engine runs at desk scale and the training
//! contract is single-threaded, so plain indexed loops keep every operation
//! deterministic and easy to audit.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == ncols), "ragged rows");
        Self {
            rows: rows.len(),
            cols: ncols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (n×k) · otherᵀ (m×k) → n×m`. Weights are stored `out×in`, so a
    /// batch forward step is `acts.mul_transpose(weights)`.
    pub fn mul_transpose(&self, other: &Matrix<F>) -> Matrix<F> {
        assert_eq!(self.cols, other.cols, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = F::zero();
                for k in 0..self.cols {
                    acc += a[k] * b[k];
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// `self (n×k) · other (k×m) → n×m`.
    pub fn mul(&self, other: &Matrix<F>) -> Matrix<F> {
        assert_eq!(self.cols, other.rows, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.cols {
                let mut acc = F::zero();
                for k in 0..self.cols {
                    acc += a[k] * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// `selfᵀ · other`: with `self` `n×r` and `other` `n×c`, returns `r×c`
    /// where `out[i][j] = Σ_s self[s][i]·other[s][j]`.
    pub fn transpose_mul(&self, other: &Matrix<F>) -> Matrix<F> {
        assert_eq!(self.rows, other.rows, "outer dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.cols {
            for j in 0..other.cols {
                let mut acc = F::zero();
                for s in 0..self.rows {
                    acc += self.get(s, i) * other.get(s, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix<F>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Matrix<F> {
        let mut out = Matrix::zeros(keep.len(), self.cols);
        for (i, &r) in keep.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_cols(&self, keep: &[usize]) -> Matrix<F> {
        let mut out = Matrix::zeros(self.rows, keep.len());
        for r in 0..self.rows {
            for (i, &c) in keep.iter().enumerate() {
                out.set(r, i, self.get(r, c));
            }
        }
        out
    }

    /// Grow to `rows×cols`, placing the old block top-left and `fill`
    /// elsewhere.
    pub fn grown(&self, rows: usize, cols: usize, fill: F) -> Matrix<F> {
        assert!(rows >= self.rows && cols >= self.cols);
        let mut out = Matrix {
            rows,
            cols,
            data: vec![fill; rows * cols],
        };
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
        }
        out
    }

    /// Concatenate columns of `parts` (all with equal row counts).
    pub fn hcat(parts: &[&Matrix<F>]) -> Matrix<F> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows));
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut at = 0;
            for p in parts {
                dst[at..at + p.cols].copy_from_slice(p.row(r));
                at += p.cols;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_transpose_matches_by_hand() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let w = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0], vec![9.0, 10.0]]);
        let out = a.mul_transpose(&w);
        assert_eq!(out.rows(), 2);
        assert_eq!(out.cols(), 3);
        assert_eq!(out.get(0, 0), 1.0 * 5.0 + 2.0 * 6.0);
        assert_eq!(out.get(1, 2), 3.0 * 9.0 + 4.0 * 10.0);
    }

    #[test]
    fn select_and_grow() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let r = m.select_rows(&[1]);
        assert_eq!(r.row(0), &[4.0, 5.0, 6.0]);
        let c = m.select_cols(&[0, 2]);
        assert_eq!(c.row(1), &[4.0, 6.0]);
        let g = m.grown(3, 4, 0.0);
        assert_eq!(g.get(1, 2), 6.0);
        assert_eq!(g.get(2, 3), 0.0);
    }
}
