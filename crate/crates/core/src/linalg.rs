//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Checks a square matrix is symmetric and positive semi-definite, allowing a
/// relative tolerance on both.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    if max_asymmetry(m) > 1e-9 * scale {
        return Err(Error::Validation(format!("{what} is not symmetric")));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    if min < -1e-9 * scale {
        return Err(Error::Validation(format!(
            "{what} is not positive semi-definite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::Validation(format!("{what} is not positive definite")))
}

pub fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    Ok(cholesky(m, what)?.solve(rhs))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(m, what)?.inverse())
}

/// Inverse of a symmetric matrix whose eigenvalues are clamped from below at
/// `floor`. Falls through to a plain Cholesky inverse when that succeeds and
/// the smallest pivot is already above the floor.
pub fn floored_spd_inverse(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        let l = ch.l_dirty();
        let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > floor {
            return ch.inverse();
        }
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

/// Orthonormal basis of the column span of `m` via thin QR. Errors when the
/// columns are numerically dependent.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return Err(Error::Dimension(format!("cannot orthonormalize {cols} columns in dimension {rows}")));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    for i in 0..cols {
        if r[(i, i)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Rank(format!("column {i} is linearly dependent on the previous ones")));
        }
    }
    let mut q = qr.q();
    // Fix signs so that diag(R) > 0, making the result a function of the span
    // and column order only.
    for i in 0..cols {
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
        }
    }
    Ok(q)
}

/// Orthogonal projector `B Bᵀ` onto the span of orthonormal columns `B`.
pub fn projector(basis: &DMatrix<f64>) -> DMatrix<f64> {
    basis * basis.transpose()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Largest |BᵀB − I| entry.
pub fn orthonormality_error(b: &DMatrix<f64>) -> f64 {
    let g = b.transpose() * b;
    max_abs_diff(&g, &DMatrix::identity(b.ncols(), b.ncols()))
}

/// Column means of a row-sample matrix.
pub fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Sample covariance (divisor n − 1) of a row-sample matrix.
pub fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = column_mean(x);
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    centered.transpose() * &centered / (n.max(2) - 1) as f64
}

/// Uncentered second moment `XᵀX / n`.
pub fn second_moment(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * x / x.nrows() as f64
}
