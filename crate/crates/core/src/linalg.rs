//! Small dense symmetric-positive-definite helpers shared by the samplers
//! and the baseline optimizers. Everything is row-major and in place; the
//! systems involved are tiny (covariate dimension or basis count).

use crate::error::{Error, Result};

/// In-place lower Cholesky factor. The upper triangle is left stale; the
/// solvers only read the lower part.
pub(crate) fn cholesky(m: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut diag = m[j * n + j];
        for p in 0..j {
            diag -= m[j * n + p] * m[j * n + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::numerical(
                "matrix is not positive definite; cannot factor",
            ));
        }
        let lj = diag.sqrt();
        m[j * n + j] = lj;
        for i in (j + 1)..n {
            let mut v = m[i * n + j];
            for p in 0..j {
                v -= m[i * n + p] * m[j * n + p];
            }
            m[i * n + j] = v / lj;
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky`].
pub(crate) fn chol_solve(l: &[f64], b: &mut [f64], n: usize) {
    for i in 0..n {
        let mut v = b[i];
        for p in 0..i {
            v -= l[i * n + p] * b[p];
        }
        b[i] = v / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for p in (i + 1)..n {
            v -= l[p * n + i] * b[p];
        }
        b[i] = v / l[i * n + i];
    }
}

/// Solves `Lᵀ x = z` in place; for iid standard normal `z` the result has
/// covariance `(L Lᵀ)⁻¹`.
pub(crate) fn chol_lt_solve(l: &[f64], b: &mut [f64], n: usize) {
    for i in (0..n).rev() {
        let mut v = b[i];
        for p in (i + 1)..n {
            v -= l[p * n + i] * b[p];
        }
        b[i] = v / l[i * n + i];
    }
}
