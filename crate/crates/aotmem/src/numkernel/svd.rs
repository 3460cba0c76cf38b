//! Singular value decomposition via Householder bidiagonalization and
//! implicit-shift (Golub-Kahan) bidiagonal QR.

use serde::{Deserialize, Serialize};

use crate::numkernel::Matrix;
use crate::{Error, Result};

/// Factorization `m = U * diag(singular_values) * Vt` with `U` (rows x rows)
/// and `Vt` (cols x cols) orthogonal and singular values sorted descending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
    /// Number of singular values above `tol * sigma_max`.
    pub numeric_rank: usize,
    /// Relative tolerance the rank was computed against.
    pub tol: f64,
}

impl SvdResult {
    /// Rebuild the original matrix from the factors (test aid).
    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows;
        let n = self.vt.cols;
        let k = self.singular_values.len();
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for (l, &sv) in self.singular_values.iter().enumerate().take(k) {
                    s += self.u[(i, l)] * sv * self.vt[(l, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// Recompute the rank against a different relative tolerance.
    pub fn rank_at(&self, tol: f64) -> usize {
        let thresh = tol * self.sigma_max();
        self.singular_values.iter().filter(|&&s| s > thresh).count()
    }
}

/// Compute the SVD of `m` with relative rank tolerance `tol`.
///
/// Fails with [`Error::SvdNonConvergence`] if the QR iteration exceeds its
/// sweep budget, and never returns silently wrong factors.
pub fn svd(m: &Matrix, tol: f64) -> Result<SvdResult> {
    if tol <= 0.0 {
        return Err(Error::InvalidArg("svd tolerance must be positive".into()));
    }
    m.check_finite("svd input")?;
    if m.rows == 0 || m.cols == 0 {
        return Ok(SvdResult {
            u: Matrix::identity(m.rows),
            singular_values: vec![],
            vt: Matrix::identity(m.cols),
            numeric_rank: 0,
            tol,
        });
    }
    if m.rows < m.cols {
        // Wide: factor the transpose and swap the roles of U and V.
        let t = svd_tall(&m.transpose(), true)?;
        let (u, s, vt) = t;
        let res_u = vt.transpose();
        let res_vt = u.transpose();
        return Ok(finish(res_u, s, res_vt, tol));
    }
    let (u, s, vt) = svd_tall(m, true)?;
    Ok(finish(u, s, vt, tol))
}

/// Singular values only (no U/V accumulation); descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows == 0 || m.cols == 0 {
        return Ok(vec![]);
    }
    let work = if m.rows < m.cols { m.transpose() } else { m.clone() };
    let (_, s, _) = svd_tall(&work, false)?;
    Ok(s)
}

fn finish(u: Matrix, s: Vec<f64>, vt: Matrix, tol: f64) -> SvdResult {
    let sigma_max = s.first().copied().unwrap_or(0.0);
    let thresh = tol * sigma_max;
    let numeric_rank = s.iter().filter(|&&x| x > thresh).count();
    SvdResult {
        u,
        singular_values: s,
        vt,
        numeric_rank,
        tol,
    }
}

/// SVD of a tall (rows >= cols) matrix. Returns (U, sigma, Vt).
fn svd_tall(a: &Matrix, factors: bool) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let m = a.rows;
    let n = a.cols;
    debug_assert!(m >= n);

    let mut work = a.clone();
    let mut u = if factors { Matrix::identity(m) } else { Matrix::zeros(0, 0) };
    let mut v = if factors { Matrix::identity(n) } else { Matrix::zeros(0, 0) };
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];

    bidiagonalize(&mut work, &mut diag, &mut off, &mut u, &mut v, factors);
    bidiagonal_qr(&mut diag, &mut off, &mut u, &mut v, factors, 40 * m.max(30))?;

    let vt = if factors { v.transpose() } else { v };
    Ok((u, diag, vt))
}

/// Householder bidiagonalization of a tall matrix, accumulating U (m x m)
/// and V (n x n) when `factors` is set. Reflector vectors are stored in the
/// zeroed-out part of `a` during the sweep.
fn bidiagonalize(
    a: &mut Matrix,
    diag: &mut [f64],
    off: &mut [f64],
    u: &mut Matrix,
    v: &mut Matrix,
    factors: bool,
) {
    let m = a.rows;
    let n = a.cols;
    let eps = f64::EPSILON;

    for k in 0..n {
        // Left reflector: zero a[k+1.., k].
        let mut norm_sq = 0.0;
        for i in k..m {
            norm_sq += a[(i, k)] * a[(i, k)];
        }
        if norm_sq > eps * eps {
            let norm = norm_sq.sqrt();
            let akk = a[(k, k)];
            let sigma = if akk >= 0.0 { norm } else { -norm };
            let v0 = akk + sigma;
            a[(k, k)] = v0;
            for i in (k + 1)..m {
                a[(i, k)] /= v0;
            }
            let tau = v0 / sigma;

            for j in (k + 1)..n {
                let mut dot = a[(k, j)];
                for i in (k + 1)..m {
                    dot += a[(i, k)] * a[(i, j)];
                }
                dot *= tau;
                a[(k, j)] -= dot;
                for i in (k + 1)..m {
                    let vi = a[(i, k)];
                    a[(i, j)] -= dot * vi;
                }
            }

            if factors {
                for row in 0..m {
                    let mut dot = u[(row, k)];
                    for i in (k + 1)..m {
                        dot += u[(row, i)] * a[(i, k)];
                    }
                    dot *= tau;
                    u[(row, k)] -= dot;
                    for i in (k + 1)..m {
                        let vi = a[(i, k)];
                        u[(row, i)] -= dot * vi;
                    }
                }
            }
            diag[k] = -sigma;
        } else {
            diag[k] = a[(k, k)];
        }

        // Right reflector: zero a[k, k+2..].
        if k + 3 <= n {
            let mut norm_sq = 0.0;
            for j in (k + 1)..n {
                norm_sq += a[(k, j)] * a[(k, j)];
            }
            if norm_sq > eps * eps {
                let norm = norm_sq.sqrt();
                let ak1 = a[(k, k + 1)];
                let sigma = if ak1 >= 0.0 { norm } else { -norm };
                let v0 = ak1 + sigma;
                a[(k, k + 1)] = v0;
                for j in (k + 2)..n {
                    a[(k, j)] /= v0;
                }
                let tau = v0 / sigma;

                for i in (k + 1)..m {
                    let mut dot = a[(i, k + 1)];
                    for j in (k + 2)..n {
                        dot += a[(i, j)] * a[(k, j)];
                    }
                    dot *= tau;
                    a[(i, k + 1)] -= dot;
                    for j in (k + 2)..n {
                        let vj = a[(k, j)];
                        a[(i, j)] -= dot * vj;
                    }
                }

                if factors {
                    for row in 0..n {
                        let mut dot = v[(row, k + 1)];
                        for j in (k + 2)..n {
                            dot += v[(row, j)] * a[(k, j)];
                        }
                        dot *= tau;
                        v[(row, k + 1)] -= dot;
                        for j in (k + 2)..n {
                            let vj = a[(k, j)];
                            v[(row, j)] -= dot * vj;
                        }
                    }
                }
                off[k] = -sigma;
            } else {
                off[k] = a[(k, k + 1)];
            }
        } else if k + 2 <= n {
            off[k] = a[(k, k + 1)];
        }
    }
}

#[inline]
fn givens(a: f64, b: f64) -> (f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        (1.0, 0.0)
    } else {
        (a / r, b / r)
    }
}

/// Implicit-shift QR on the bidiagonal (diag, off), accumulating the
/// rotations into U and V columns when `factors` is set. On success `diag`
/// holds the singular values sorted descending and `off` is zeroed.
fn bidiagonal_qr(
    diag: &mut [f64],
    off: &mut [f64],
    u: &mut Matrix,
    v: &mut Matrix,
    factors: bool,
    max_sweeps: usize,
) -> Result<()> {
    let n = diag.len();
    if n == 0 {
        return Ok(());
    }
    if n == 1 {
        if diag[0] < 0.0 {
            diag[0] = -diag[0];
            if factors {
                flip_col(u, 0);
            }
        }
        return Ok(());
    }

    let eps = f64::EPSILON;
    let mut sweeps = 0usize;
    let mut hi = n - 1;

    while hi > 0 {
        // Deflate a negligible trailing off-diagonal.
        let threshold = eps * (diag[hi - 1].abs() + diag[hi].abs());
        if off[hi - 1].abs() <= threshold {
            off[hi - 1] = 0.0;
            hi -= 1;
            continue;
        }

        // Find the start of the unreduced block.
        let mut lo = hi - 1;
        while lo > 0 {
            let t = eps * (diag[lo - 1].abs() + diag[lo].abs());
            if off[lo - 1].abs() <= t {
                off[lo - 1] = 0.0;
                break;
            }
            lo -= 1;
        }

        sweeps += 1;
        if sweeps > max_sweeps {
            return Err(Error::SvdNonConvergence(max_sweeps));
        }

        // A zero diagonal inside the block breaks the shift; chase its
        // off-diagonal off the bottom with left rotations first.
        let mut restarted = false;
        for idx in lo..hi {
            if diag[idx].abs() <= eps * (diag[idx + 1].abs() + off[idx].abs()).max(eps) {
                diag[idx] = 0.0;
                let mut z = off[idx];
                off[idx] = 0.0;
                for j in (idx + 1)..=hi {
                    let (c, s) = givens(diag[j], z);
                    diag[j] = c * diag[j] + s * z;
                    if j < hi {
                        z = -s * off[j];
                        off[j] *= c;
                    }
                    if factors {
                        rotate_cols(u, j, idx, c, s);
                    }
                }
                restarted = true;
                break;
            }
        }
        if restarted {
            continue;
        }

        // Wilkinson shift from the trailing 2x2 of B^T B.
        let d_hi = diag[hi];
        let d_h1 = diag[hi - 1];
        let e_h1 = off[hi - 1];
        let e_h2 = if hi >= 2 && hi - 2 >= lo { off[hi - 2] } else { 0.0 };

        let t11 = d_h1 * d_h1 + e_h2 * e_h2;
        let t12 = d_h1 * e_h1;
        let t22 = d_hi * d_hi + e_h1 * e_h1;

        let dd = (t11 - t22) / 2.0;
        let sign_d = if dd >= 0.0 { 1.0 } else { -1.0 };
        let mu = t22 - t12 * t12 / (dd + sign_d * (dd * dd + t12 * t12).sqrt());

        // Bulge chase.
        let mut x = diag[lo] * diag[lo] - mu;
        let mut z = diag[lo] * off[lo];

        for k in lo..hi {
            let (c, s) = givens(x, z);
            if k > lo {
                off[k - 1] = c * x + s * z;
            }

            let dk = diag[k];
            let ek = off[k];
            let dk1 = diag[k + 1];

            diag[k] = c * dk + s * ek;
            off[k] = c * ek - s * dk;
            let bulge = s * dk1;
            diag[k + 1] = c * dk1;

            if factors {
                rotate_cols(v, k, k + 1, c, s);
            }

            let (c2, s2) = givens(diag[k], bulge);
            diag[k] = c2 * diag[k] + s2 * bulge;
            let old_ek = off[k];
            let old_dk1 = diag[k + 1];
            off[k] = c2 * old_ek + s2 * old_dk1;
            diag[k + 1] = c2 * old_dk1 - s2 * old_ek;

            if k + 1 < hi {
                let old_ek1 = off[k + 1];
                x = off[k];
                z = s2 * old_ek1;
                off[k + 1] = c2 * old_ek1;
            }

            if factors {
                rotate_cols(u, k, k + 1, c2, s2);
            }
        }
    }

    // Non-negative singular values.
    for i in 0..n {
        if diag[i] < 0.0 {
            diag[i] = -diag[i];
            if factors {
                flip_col(u, i);
            }
        }
    }

    // Sort descending, permuting U and V columns alongside.
    for i in 0..n {
        let mut max_idx = i;
        for j in (i + 1)..n {
            if diag[j] > diag[max_idx] {
                max_idx = j;
            }
        }
        if max_idx != i {
            diag.swap(i, max_idx);
            if factors {
                swap_cols(u, i, max_idx);
                swap_cols(v, i, max_idx);
            }
        }
    }

    Ok(())
}

/// Columns (a, b) <- (c*col_a + s*col_b, c*col_b - s*col_a).
#[inline]
fn rotate_cols(m: &mut Matrix, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..m.rows {
        let xa = m[(row, a)];
        let xb = m[(row, b)];
        m[(row, a)] = c * xa + s * xb;
        m[(row, b)] = c * xb - s * xa;
    }
}

#[inline]
fn flip_col(m: &mut Matrix, j: usize) {
    for row in 0..m.rows {
        m[(row, j)] = -m[(row, j)];
    }
}

#[inline]
fn swap_cols(m: &mut Matrix, a: usize, b: usize) {
    for row in 0..m.rows {
        let t = m[(row, a)];
        m[(row, a)] = m[(row, b)];
        m[(row, b)] = t;
    }
}
