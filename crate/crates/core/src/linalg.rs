//! Dense symmetric matrices and small vector helpers.
//!
//! Everything here targets the desk-scale regime (total dimension at most 16),
//! so matrices are stored densely and eigen-decompositions are computed on demand.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest total dimension the library is tuned for.
pub const MAX_DIMENSION: usize = 16;

/// A real symmetric matrix.
///
/// The lower triangle is always a mirror of the upper triangle, so
/// `entries[(i, j)] == entries[(j, i)]` holds bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        SymMatrix(DMatrix::identity(n, n) * s)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds the matrix from the upper triangle of `m`, mirroring it below the diagonal.
    pub fn from_upper(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        Ok(SymMatrix(DMatrix::from_fn(n, n, |i, j| {
            if i <= j {
                m[(i, j)]
            } else {
                m[(j, i)]
            }
        })))
    }

    /// Builds the matrix as `(m + mᵗ) / 2`.
    pub fn symmetrize(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let avg = (m + m.transpose()) * 0.5;
        Self::from_upper(&avg)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(
                "matrix rows must all have the same length as the row count".into(),
            ));
        }
        let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Self::from_upper(&m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Eigenvalues in nondecreasing order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim() == 0 {
            return Vec::new();
        }
        let eig = SymmetricEigen::new(self.0.clone());
        let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        values
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().last().copied().unwrap_or(0.0)
    }

    pub fn is_semipositive(&self, slack: f64) -> bool {
        self.dim() == 0 || self.min_eigenvalue() >= -slack
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot add {}x{} and {}x{} matrices",
                self.dim(),
                self.dim(),
                other.dim(),
                other.dim()
            )));
        }
        Self::from_upper(&(&self.0 + &other.0))
    }

    pub fn add_identity(&self, s: f64) -> SymMatrix {
        let n = self.dim();
        SymMatrix(&self.0 + DMatrix::identity(n, n) * s)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Quadratic form `vᵗ A v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.0 * v))
    }

    /// Row-major upper triangle, the order used by CSV exports.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    /// Principal sub-block `[start, start + len)`.
    pub fn principal_block(&self, start: usize, len: usize) -> SymMatrix {
        SymMatrix(self.0.view((start, start), (len, len)).into_owned())
    }

    /// Moore-Penrose pseudo-inverse through the eigen-decomposition, with
    /// eigenvalues below `cutoff` treated as zero.
    pub fn pseudo_inverse(&self, cutoff: f64) -> SymMatrix {
        let n = self.dim();
        if n == 0 {
            return SymMatrix::zeros(0);
        }
        let eig = SymmetricEigen::new(self.0.clone());
        let mut inv = DMatrix::zeros(n, n);
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda.abs() > cutoff {
                let v = eig.eigenvectors.column(k);
                inv += (v * v.transpose()) / lambda;
            }
        }
        SymMatrix::from_upper(&inv).expect("square by construction")
    }
}

impl TryFrom<Vec<Vec<f64>>> for SymMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SymMatrix::from_rows(&rows)
    }
}

impl From<SymMatrix> for Vec<Vec<f64>> {
    fn from(m: SymMatrix) -> Self {
        matrix_rows(&m.0)
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Builds a dense matrix from row vectors; an empty row list yields a `0 x cols` matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch(format!(
            "every row must have {cols} entries"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn vector(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

pub fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Spectral norm of a general dense matrix.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_upper_mirrors_exactly() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 7.0, 3.0]);
        let s = SymMatrix::from_upper(&m).unwrap();
        assert_eq!(s.get(1, 0), 2.0);
        assert_eq!(s.get(0, 1), 2.0);
    }

    #[test]
    fn eigenvalues_are_sorted() {
        let s = SymMatrix::from_diagonal(&[5.0, -1.0, 2.0]);
        assert_eq!(s.eigenvalues(), vec![-1.0, 2.0, 5.0]);
    }

    #[test]
    fn pseudo_inverse_of_singular_diagonal() {
        let s = SymMatrix::from_diagonal(&[2.0, 0.0]);
        let p = s.pseudo_inverse(1e-12);
        assert_eq!(p.get(0, 0), 0.5);
        assert_eq!(p.get(1, 1), 0.0);
    }

    #[test]
    fn non_square_rejected() {
        let m = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            SymMatrix::from_upper(&m),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn upper_triangle_is_row_major() {
        let s = SymMatrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 5.0],
            vec![3.0, 5.0, 6.0],
        ])
        .unwrap();
        assert_eq!(s.upper_triangle(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
