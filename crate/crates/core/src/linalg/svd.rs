//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! The full thin SVD is computed first; truncation keeps the leading triplets.
//! Columns of `U` belonging to (numerically) zero singular values are completed
//! to an orthonormal set, so `U` always has orthonormal columns even for
//! rank-deficient inputs.

use super::{LinalgError, Matrix};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `M ≈ U diag(S) Vᵀ` with `k` retained triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `n × k`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul(&self.v.transpose())
            .expect("svd factors have consistent shapes")
    }

    fn truncate(self, r: usize) -> SvdResult {
        SvdResult {
            u: self.u.submatrix(0..self.u.rows(), 0..r),
            s: self.s[..r].to_vec(),
            v: self.v.submatrix(0..self.v.rows(), 0..r),
        }
    }
}

/// Full thin SVD with `k = min(rows, cols)` triplets.
pub fn svd(m: &Matrix) -> Result<SvdResult, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(LinalgError::Empty);
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        // Aᵀ = V S Uᵀ
        let t = jacobi_tall(&m.transpose());
        let mut out = SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Leading `r` singular triplets of `m`.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<SvdResult, LinalgError> {
    let max = m.rows().min(m.cols());
    if r == 0 || r > max {
        return Err(LinalgError::RankOutOfRange { rank: r, max });
    }
    Ok(svd(m)?.truncate(r))
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>, LinalgError> {
    let cross = a.transpose().matmul(b)?;
    let s = svd(&cross)?.s;
    Ok(s.iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_tall(m: &Matrix) -> SvdResult {
    let (rows, n) = m.shape();
    // column-major working copies
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal singular values keep Jacobi order
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let s_max = norms.iter().cloned().fold(0.0, f64::max);
    let tol = (rows.max(n) as f64) * eps * s_max;

    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > tol && sigma > 0.0 {
            s.push(sigma);
            u_cols.push(u[j].iter().map(|x| x / sigma).collect());
        } else {
            s.push(0.0);
            u_cols.push(vec![0.0; rows]);
            deficient.push(k);
        }
        v_cols.push(v[j].clone());
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let mut out = SvdResult {
        u: Matrix::from_fn(rows, n, |i, j| u_cols[j][i]),
        s,
        v: Matrix::from_fn(n, n, |i, j| v_cols[j][i]),
    };
    fix_signs(&mut out);
    out
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to all
/// other columns, drawing candidates from the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < dim, "cannot complete orthonormal basis");
            let mut w = vec![0.0; dim];
            w[candidate] = 1.0;
            candidate += 1;
            // two Gram-Schmidt passes
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (missing.contains(&j) && c.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&w, c);
                    for (wi, ci) in w.iter_mut().zip(c) {
                        *wi -= proj * ci;
                    }
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm > 1e-8 {
                cols[k] = w.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry of each `U` column non-negative,
/// flipping the matching `V` column.
fn fix_signs(svd: &mut SvdResult) {
    let (m, k) = svd.u.shape();
    for j in 0..k {
        let mut best = 0;
        for i in 1..m {
            if svd.u.get(i, j).abs() > svd.u.get(best, j).abs() {
                best = i;
            }
        }
        if svd.u.get(best, j) < 0.0 {
            for i in 0..m {
                svd.u.set(i, j, -svd.u.get(i, j));
            }
            for i in 0..svd.v.rows() {
                svd.v.set(i, j, -svd.v.get(i, j));
            }
        }
    }
}
