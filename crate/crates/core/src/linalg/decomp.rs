//! Thin SVD by one-sided Jacobi, row-space orthonormalization and
//! Kaiming-uniform initialization.

use super::matrix::dot;
use super::{Matrix, Rng};
use crate::error::{Error, Result};

/// Rank tolerance relative to the largest singular value.
pub const RANK_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

/// `m ≈ u · diag(sigma) · v` with `u` p×k, `v` k×q and k = min(p, q).
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// `u · diag(sigma) · v`.
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.sigma.len())
    }

    /// Best rank-`r` approximation from the leading triplets.
    pub fn reconstruct_rank(&self, r: usize) -> Matrix {
        let r = r.min(self.sigma.len());
        let us = Matrix::from_fn(self.u.rows(), r, |i, j| self.u.get(i, j) * self.sigma[j]);
        us.matmul(&self.v.slice_rows(0, r)).expect("svd factors are conformable")
    }

    /// `u · diag(sigma)` (p×k).
    pub fn u_sigma(&self) -> Matrix {
        Matrix::from_fn(self.u.rows(), self.sigma.len(), |i, j| self.u.get(i, j) * self.sigma[j])
    }

    /// Number of singular values above `tol · sigma_max`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|s| **s > tol * top).count()
    }
}

/// Thin SVD of `m`.
///
/// Columns (or rows, for wide inputs) are orthogonalized by cyclic Jacobi
/// rotations. Singular triplets are sorted by descending sigma; each right
/// singular row is signed so that its first nonzero entry is positive.
pub fn svd_thin(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd input contains NaN or Inf".into()));
    }
    if m.rows() >= m.cols() {
        let (u, sigma, v) = jacobi_tall(m);
        Ok(canonical_signs(SvdResult { u, sigma, v }))
    } else {
        // m = (mᵀ)ᵀ = (U Σ V)ᵀ = Vᵀ Σ Uᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&m.transpose());
        Ok(canonical_signs(SvdResult { u: v_t.transpose(), sigma, v: u_t.transpose() }))
    }
}

/// One-sided Jacobi on a p×q matrix with p ≥ q. Returns (U p×q, sigma, V q×q as rows).
fn jacobi_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (p, q) = m.shape();
    // Column-major working copies so each column is contiguous.
    let mut cols: Vec<Vec<f64>> = (0..q).map(|j| m.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    // Stable sort keeps index order among equal singular values.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let top = sigma[0];
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut missing = Vec::new();
    for (slot, &k) in order.iter().enumerate() {
        if top > 0.0 && norms[k] > RANK_TOL * 1e-3 * top {
            ucols.push(cols[k].iter().map(|v| v / norms[k]).collect());
        } else {
            ucols.push(vec![0.0; p]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut ucols, &missing);

    let u = Matrix::from_fn(p, q, |i, j| ucols[j][i]);
    let v = Matrix::from_fn(q, q, |i, j| vcols[order[i]][j]);
    (u, sigma, v)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let ci = &mut left[i];
    let cj = &mut right[0];
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let p = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        while candidate < p {
            let mut v = vec![0.0; p];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let proj = dot(&v, other);
                    for (a, b) in v.iter_mut().zip(other) {
                        *a -= proj * b;
                    }
                }
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-6 {
                cols[slot] = v.iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

fn canonical_signs(mut svd: SvdResult) -> SvdResult {
    let k = svd.sigma.len();
    for i in 0..k {
        let row = svd.v.row(i);
        let scale = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let first = row.iter().copied().find(|v| v.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE));
        if matches!(first, Some(f) if f < 0.0) {
            for v in svd.v.row_mut(i) {
                *v = -*v;
            }
            for r in 0..svd.u.rows() {
                let x = svd.u.get(r, i);
                svd.u.set(r, i, -x);
            }
        }
    }
    svd
}

/// Orthonormal rows spanning the row space of `m`.
///
/// Requires full row rank (within [`RANK_TOL`] relative to the largest
/// singular value); otherwise reports the numerical rank. The basis itself
/// comes from modified Gram-Schmidt with one reorthogonalization pass.
pub fn orthonormal_basis(m: &Matrix) -> Result<Matrix> {
    let svd = svd_thin(m)?;
    let rank = svd.numerical_rank(RANK_TOL);
    if rank < m.rows() {
        return Err(Error::RankDeficient { rank, required: m.rows() });
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let mut v = m.row(i).to_vec();
        for _ in 0..2 {
            for b in &q {
                let proj = dot(&v, b);
                for (a, x) in v.iter_mut().zip(b) {
                    *a -= proj * x;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n == 0.0 {
            return Err(Error::RankDeficient { rank: i, required: m.rows() });
        }
        q.push(v.iter().map(|x| x / n).collect());
    }
    Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| q[i][j]))
}

/// He-uniform initialization: entries i.i.d. on `[-b, b]`, `b = sqrt(6 / cols)`.
///
/// Fan-in is the column count (row-vector-times-matrixᵀ convention).
pub fn kaiming_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput(format!("kaiming_uniform needs positive dims, got {rows}x{cols}")));
    }
    let b = kaiming_bound(cols);
    Ok(rng.uniform_matrix(rows, cols, -b, b))
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
