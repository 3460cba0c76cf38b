//! Minimum-norm least squares via the SVD pseudoinverse.

use crate::numkernel::{svd, Matrix};
use crate::{Error, Result};

/// Solve `A X = B` in the least-squares sense; among all minimizers of
/// `||A X - B||_F`, returns the one of minimal Frobenius norm.
///
/// Singular values at or below `tol * sigma_max` are treated as zero.
pub fn lstsq_min_norm(a: &Matrix, b: &Matrix, tol: f64) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::DimMismatch(format!(
            "lstsq: A has {} rows but B has {}",
            a.rows, b.rows
        )));
    }
    let f = svd(a, tol)?;
    let thresh = tol * f.sigma_max();

    // X = V * Sigma^+ * U^T * B, restricted to the numerically nonzero part.
    let utb = f.u.transpose().matmul(b); // rows x b.cols (only first k rows used)
    let k = f.singular_values.len();
    let mut x = Matrix::zeros(a.cols, b.cols);
    for l in 0..k {
        let s = f.singular_values[l];
        if s <= thresh {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..a.cols {
            let v_il = f.vt[(l, i)];
            if v_il == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                x[(i, j)] += v_il * inv * utb[(l, j)];
            }
        }
    }
    Ok(x)
}
