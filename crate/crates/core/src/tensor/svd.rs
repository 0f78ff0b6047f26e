// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided (Hestenes) Jacobi singular value decomposition.
//!
//! The input is copied to 64-bit and its columns are orthogonalised by plane
//! rotations until every pair is orthogonal to [`SVD_TOLERANCE`] relative to
//! the pair's norms. Wide inputs are decomposed through their transpose.
//!
//! Output convention: singular values sorted non-increasing (stable on ties),
//! and each left singular vector is signed so that its entry of largest
//! magnitude is non-negative, first such entry on ties.

use super::{Dense, Element, Matrix64};
use crate::error::{Error, Result};

/// Sweep cap before reporting non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal threshold below which a column pair is left alone.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Thin SVD `M = U · diag(σ) · Vᵀ` with `k = min(m, n)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// m × k, orthonormal columns.
    pub u: Matrix64,
    /// k values, non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// n × k, orthonormal columns.
    pub v: Matrix64,
}

impl SvdFactors {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix64 {
        self.partial_product(self.k())
    }

    /// Count of singular values above `tol · σ_max`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > tol * top && s > 0.0).count()
    }

    fn partial_product(&self, r: usize) -> Matrix64 {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix64::zeros(m, n);
        let data = out.data_mut();
        for j in 0..r {
            let s = self.singular_values[j];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, j) * s;
                if us == 0.0 {
                    continue;
                }
                let row = &mut data[i * n..(i + 1) * n];
                for (c, o) in row.iter_mut().enumerate() {
                    *o += us * self.v.get(c, j);
                }
            }
        }
        out
    }
}

/// Decomposes `m`. Errors name the matrix by its shape; use [`svd_labeled`]
/// to attach a tensor name.
pub fn svd<T: Element>(m: &Dense<T>) -> Result<SvdFactors> {
    svd_labeled(m, &format!("matrix {}x{}", m.rows(), m.cols()))
}

pub fn svd_labeled<T: Element>(m: &Dense<T>, label: &str) -> Result<SvdFactors> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Param(format!("svd of empty {label}")));
    }
    let a = m.to_f64();
    let mut f = if a.rows() >= a.cols() {
        jacobi_tall(&a, label)?
    } else {
        let t = jacobi_tall(&a.transpose(), label)?;
        SvdFactors { u: t.v, singular_values: t.singular_values, v: t.u }
    };
    fix_signs(&mut f);
    Ok(f)
}

/// Best rank-`r` approximation `Σ_{i<r} σ_i u_i v_iᵀ`.
pub fn truncate_rank(f: &SvdFactors, r: usize) -> Result<Matrix64> {
    if r == 0 || r > f.k() {
        return Err(Error::Param(format!("rank {r} outside 1..={}", f.k())));
    }
    Ok(f.partial_product(r))
}

fn jacobi_tall(a: &Matrix64, label: &str) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    // Work column-major: cols[j] is column j of the evolving matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    // Columns below this squared norm are numerically zero.
    let floor = (f64::EPSILON * a.frobenius_norm()).powi(2);

    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = pair_moments(&cols[p], &cols[q]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                if gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence { matrix: label.to_string(), sweeps: SVD_MAX_SWEEPS });
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut v = Matrix64::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        singular_values.push(s);
        if s * s > floor && s > 0.0 {
            ucols.push(Some(cols[src].iter().map(|x| x / s).collect()));
        } else {
            ucols.push(None);
        }
        for i in 0..n {
            v.set(i, dst, vcols[src][i]);
        }
    }
    let ucols = complete_orthonormal(m, ucols);
    let u = Matrix64::from_fn(m, n, |i, j| ucols[j][i]);
    Ok(SvdFactors { u, singular_values, v })
}

fn pair_moments(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills missing columns with unit vectors orthogonal to everything already
/// present, drawn from the standard basis in index order.
fn complete_orthonormal(m: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut next_e = 0;
    cols.into_iter()
        .map(|c| match c {
            Some(c) => c,
            None => loop {
                assert!(next_e < m, "ran out of basis vectors completing U");
                let mut w = vec![0.0; m];
                w[next_e] = 1.0;
                next_e += 1;
                // Two Gram-Schmidt passes.
                for _ in 0..2 {
                    for b in &basis {
                        let d: f64 = b.iter().zip(&w).map(|(x, y)| x * y).sum();
                        for (wi, bi) in w.iter_mut().zip(b) {
                            *wi -= d * bi;
                        }
                    }
                }
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    w.iter_mut().for_each(|x| *x /= norm);
                    basis.push(w.clone());
                    break w;
                }
            },
        })
        .collect()
}

fn fix_signs(f: &mut SvdFactors) {
    for j in 0..f.k() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..f.u.rows() {
            let a = f.u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if f.u.get(best, j) < 0.0 {
            for i in 0..f.u.rows() {
                let x = f.u.get(i, j);
                f.u.set(i, j, -x);
            }
            for i in 0..f.v.rows() {
                let x = f.v.get(i, j);
                f.v.set(i, j, -x);
            }
        }
    }
}
