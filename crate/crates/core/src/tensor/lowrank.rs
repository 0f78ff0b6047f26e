// SPDX-License-Identifier: MIT OR Apache-2.0

//! Randomised rank-r candidates, used as an Eckart–Young cross-check that
//! does not go through the SVD.

use rand::Rng;

use super::{Dense, Element, Matrix64};
use crate::error::{Error, Result};

/// Frobenius error of the best approximation `L · R` of `m` for a fixed
/// left factor `left` (m × r), with `R` fitted by least squares through the
/// normal equations `(LᵀL) R = Lᵀ M`.
pub fn rank_r_least_squares_error<T: Element>(m: &Dense<T>, left: &Matrix64) -> Result<f64> {
    if left.rows() != m.rows() {
        return Err(Error::Param("left factor row count must match matrix".into()));
    }
    let lt = left.transpose();
    let gram = lt.matmul(left)?;
    let rhs = lt.matmul(m)?;
    let right = solve_spd(&gram, &rhs)?;
    let approx = left.matmul(&right)?;
    Ok(m.sub(&approx)?.frobenius_norm())
}

/// Draws an m × r left factor with entries uniform in [-1, 1] and returns
/// the least-squares error of the resulting rank-≤r candidate.
pub fn random_rank_r_error<T: Element, R: Rng + ?Sized>(m: &Dense<T>, r: usize, rng: &mut R) -> Result<f64> {
    let left = Matrix64::from_fn(m.rows(), r, |_, _| rng.gen_range(-1.0..=1.0));
    rank_r_least_squares_error(m, &left)
}

/// Gaussian elimination with partial pivoting on `a x = b` (b may have
/// several columns). A singular pivot is reported as a parameter error.
fn solve_spd(a: &Matrix64, b: &Matrix64) -> Result<Matrix64> {
    let n = a.rows();
    let k = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).iter().chain(b.row(i)).copied().collect()).collect();
    let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())).unwrap_or(col);
        if aug[piv][col].abs() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Param("singular left factor".into()));
        }
        aug.swap(col, piv);
        for row in col + 1..n {
            let f = aug[row][col] / aug[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n + k {
                aug[row][c] -= f * aug[col][c];
            }
        }
    }
    let mut x = Matrix64::zeros(n, k);
    for rhs in 0..k {
        for row in (0..n).rev() {
            let mut acc = aug[row][n + rhs];
            for c in row + 1..n {
                acc -= aug[row][c] * x.get(c, rhs);
            }
            x.set(row, rhs, acc / aug[row][row]);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_when_column_space_matches() {
        // m = L · R exactly, so the fitted error vanishes.
        let left = Matrix64::from_rows(&[&[1.0], &[2.0], &[-1.0]]).unwrap();
        let right = Matrix64::from_rows(&[&[0.5, -3.0]]).unwrap();
        let m = left.matmul(&right).unwrap();
        assert!(rank_r_least_squares_error(&m, &left).unwrap() < 1e-12);
    }

    #[test]
    fn random_candidates_are_finite() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 7.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let e = random_rank_r_error(&m, 1, &mut rng).unwrap();
            assert!(e.is_finite() && e >= 0.0);
        }
    }
}
