//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy of the input are rotated pairwise until every pair
//! is orthogonal to machine precision; the column norms are then the singular
//! values and the normalized columns the left singular vectors. The accumulated
//! rotations form the right singular vectors. Wide inputs are handled through
//! their transpose.

use crate::error::{PegoError, Result};
use crate::numerics::Matrix;

pub const MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `rows x p` with `p = min(rows, cols)`; columns are left singular vectors.
    pub left_vectors: Matrix,
    /// Length `p`, descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// `cols x p`; columns are right singular vectors.
    pub right_vectors: Matrix,
}

impl SvdResult {
    /// `U * diag(sigma) * V^T`
    pub fn reconstruct(&self) -> Matrix {
        let (m, p) = self.left_vectors.shape();
        let n = self.right_vectors.rows();
        Matrix::from_fn(m, n, |i, j| {
            (0..p)
                .map(|l| self.left_vectors[(i, l)] * self.singular_values[l] * self.right_vectors[(j, l)])
                .sum()
        })
    }

    pub fn left_vector(&self, j: usize) -> Vec<f64> {
        self.left_vectors.col_vec(j)
    }

    /// Count of singular values strictly above `rel_threshold * sigma_1`.
    pub fn numerical_rank(&self, rel_threshold: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .filter(|&&s| s > rel_threshold * top)
            .count()
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(PegoError::Input(format!(
            "svd of empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(PegoError::Numeric("svd input has non-finite entries".into()));
    }
    let mut out = if m.rows() >= m.cols() {
        jacobi_tall(m)?
    } else {
        let t = jacobi_tall(&m.transpose())?;
        SvdResult {
            left_vectors: t.right_vectors,
            singular_values: t.singular_values,
            right_vectors: t.left_vectors,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Work on columns stored contiguously.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| a.col_vec(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    // Columns this small are rounding residue of a null direction.
    let floor = (eps * a.frobenius()).powi(2);
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(PegoError::Numeric(format!(
                "jacobi svd did not converge after {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || alpha <= floor || beta <= floor || gamma.abs() <= eps * (alpha * beta).sqrt() {
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
        converged = !rotated;
    }

    let mut sigma: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let u: Vec<Vec<f64>> = order.iter().map(|&j| u[j].clone()).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let top = sigma[0];
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (j, col) in u.into_iter().enumerate() {
        if sigma[j] > top * 1e-15 * n as f64 && sigma[j] > 0.0 {
            left.push(col.iter().map(|x| x / sigma[j]).collect());
        } else {
            // Null direction: complete the basis so every column stays unit norm.
            left.push(orthonormal_complement(&left, m));
        }
    }

    Ok(SvdResult {
        left_vectors: columns_to_matrix(&left, m),
        singular_values: sigma,
        right_vectors: columns_to_matrix(&v, n),
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

fn orthonormal_complement(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = b.iter().zip(&e).map(|(x, y)| x * y).sum();
                for (ei, bi) in e.iter_mut().zip(b) {
                    *ei -= d * bi;
                }
            }
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, e));
        }
        if norm > 0.7 {
            break;
        }
    }
    let (norm, e) = best.expect("dim >= 1");
    e.into_iter().map(|x| x / norm).collect()
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Largest-magnitude entry of each left vector is made positive.
fn fix_signs(s: &mut SvdResult) {
    let (m, p) = s.left_vectors.shape();
    let n = s.right_vectors.rows();
    for j in 0..p {
        let mut pivot = 0;
        for i in 1..m {
            if s.left_vectors[(i, j)].abs() > s.left_vectors[(pivot, j)].abs() {
                pivot = i;
            }
        }
        if s.left_vectors[(pivot, j)] < 0.0 {
            for i in 0..m {
                s.left_vectors[(i, j)] = -s.left_vectors[(i, j)];
            }
            for i in 0..n {
                s.right_vectors[(i, j)] = -s.right_vectors[(i, j)];
            }
        }
    }
}

/// Share of squared singular-value energy carried by each of the top `k` components.
pub fn explained_variance_ratio(s: &SvdResult, k: usize) -> Result<Vec<f64>> {
    if k > s.singular_values.len() {
        return Err(PegoError::Input(format!(
            "requested {k} components of {}",
            s.singular_values.len()
        )));
    }
    let total: f64 = s.singular_values.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Err(PegoError::Degenerate("explained variance of an all-zero matrix".into()));
    }
    Ok(s.singular_values[..k].iter().map(|x| x * x / total).collect())
}
