//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{HybridError, Result};

/// Relative eigenvalue floor used for every symmetric inversion.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Symmetrize in place: `(A + Aᵗ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// True when every eigenvalue exceeds the relative floor `EIGEN_FLOOR * trace`.
pub fn is_full_rank_psd(m: &DMatrix<f64>) -> bool {
    let sym = symmetrize(m);
    let trace = sym.trace().abs();
    if !trace.is_finite() || trace == 0.0 {
        return false;
    }
    sym.symmetric_eigenvalues().min() > EIGEN_FLOOR * trace
}

/// Inverse of a symmetric positive definite matrix via its eigendecomposition.
///
/// Eigenvalues at or below `EIGEN_FLOOR * trace` make the matrix count as
/// singular; nothing is regularized.
pub fn sym_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(HybridError::InvalidInput(format!(
            "{what}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(HybridError::numerical(format!(
            "{what}: non-finite entries"
        )));
    }
    let sym = symmetrize(m);
    let trace = sym.trace().abs();
    let eig = sym.symmetric_eigen();
    let floor = EIGEN_FLOOR * trace.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&v| v <= floor) {
        return Err(HybridError::numerical(format!(
            "{what}: singular (smallest eigenvalue {:.3e}, floor {:.3e})",
            eig.eigenvalues.min(),
            floor
        )));
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let q = &eig.eigenvectors;
    Ok(symmetrize(
        &(q * DMatrix::from_diagonal(&inv_vals) * q.transpose()),
    ))
}

/// `xᵗ A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

/// Mean of outer products `n⁻¹ Σ xᵢ yᵢᵗ` with rows of `x` and `y` as the vectors.
pub fn mean_cross(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows().max(1) as f64;
    x.transpose() * y / n
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row-major flattening used in JSON output.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
