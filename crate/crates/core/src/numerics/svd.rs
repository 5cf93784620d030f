use crate::error::{Error, Result};

use super::{dot, Matrix};

const MAX_SWEEPS: usize = 60;

/// Top-`k` singular triplets of a matrix: `a ≈ u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors as columns, `rows × k`.
    pub u: Matrix,
    /// Singular values, non-increasing.
    pub sigma: Vec<f64>,
    /// Right singular vectors as columns, `cols × k`.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        Matrix::from_fn(m, n, |i, j| {
            (0..self.rank())
                .map(|t| self.u[(i, t)] * self.sigma[t] * self.v[(j, t)])
                .sum()
        })
    }
}

/// Truncated SVD by one-sided (Hestenes) Jacobi rotations applied on the
/// smaller dimension.
///
/// The result is a deterministic function of `a`: singular values are
/// sorted descending (stable on ties), and every left singular vector is
/// oriented so its largest-magnitude entry is non-negative. Singular
/// vectors belonging to (numerically) zero singular values are completed
/// to an orthonormal set.
pub fn svd_truncated(a: &Matrix, k: usize) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if k == 0 || k > m.min(n) {
        return Err(Error::domain(format!(
            "svd rank {k} out of range for a {m}x{n} matrix"
        )));
    }

    // Work on whichever orientation has fewer columns so the implicit Gram
    // matrix is the small one.
    let (mut left, sigma, mut right) = if m >= n {
        let (cols, sigma, v) = one_sided_jacobi(a)?;
        (cols, sigma, v)
    } else {
        let (cols, sigma, v) = one_sided_jacobi(&a.transpose())?;
        (v, sigma, cols)
    };

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    order.truncate(k);

    let sigma: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let mut u_cols: Vec<Vec<f64>> = order.iter().map(|&j| std::mem::take(&mut left[j])).collect();
    let mut v_cols: Vec<Vec<f64>> = order.iter().map(|&j| std::mem::take(&mut right[j])).collect();
    orthonormalize(&mut u_cols);
    orthonormalize(&mut v_cols);

    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut lead = 0;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[lead].abs() {
                lead = i;
            }
        }
        if uc[lead] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdResult {
        u: Matrix::from_fn(m, k, |i, j| u_cols[j][i]),
        sigma,
        v: Matrix::from_fn(n, k, |i, j| v_cols[j][i]),
    })
}

/// Orthogonalizes `a`'s columns in place (requires rows ≥ cols).
///
/// Returns `(left, sigma, right)` as column vectors: `left[j]` is the
/// normalized j-th rotated column (all zeros when its norm vanishes),
/// `sigma[j]` its norm, and `right[j]` the j-th column of the accumulated
/// rotation.
fn one_sided_jacobi(a: &Matrix) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * m as f64;
    // Columns shorter than this are numerically zero; rotating them against
    // each other only shuffles rounding noise and never converges.
    let negligible = (f64::EPSILON * a.frobenius_norm()).powi(2);
    let mut converged = n == 1;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if alpha <= negligible || beta <= negligible || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            routine: "jacobi svd",
            iterations: MAX_SWEEPS,
            residual,
        });
    }

    let sigma: Vec<f64> = g.iter().map(|c| dot(c, c).sqrt()).collect();
    for (col, &s) in g.iter_mut().zip(&sigma) {
        if s > 0.0 {
            col.iter_mut().for_each(|x| *x /= s);
        }
    }
    Ok((g, sigma, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Modified Gram-Schmidt over the columns in order. Columns that collapse
/// (zero singular value, or numerically dependent) are replaced with the
/// first standard basis vector that survives projection.
fn orthonormalize(cols: &mut [Vec<f64>]) {
    let dim = cols.first().map_or(0, Vec::len);
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        if project_out(col, done) > 0.5 {
            continue;
        }
        for e in 0..dim {
            col.iter_mut().for_each(|x| *x = 0.0);
            col[e] = 1.0;
            if project_out(col, done) > 1e-3 {
                break;
            }
        }
    }
}

/// Removes components along `basis` (twice, for stability), normalizes,
/// and returns the norm before normalization.
fn project_out(col: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let d = dot(col, b);
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let norm = dot(col, col).sqrt();
    if norm > 0.0 {
        col.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}
