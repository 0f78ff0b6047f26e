// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices with 64-bit accumulation.
//!
//! Checkpoint weights live in [`Matrix`] (32-bit storage). Activations,
//! decomposition factors and everything in the theory validator use
//! [`Matrix64`]. Both are the same [`Dense`] container; every reduction
//! (products, norms, inner products) accumulates in `f64` regardless of the
//! storage type.

mod lowrank;
mod svd;

pub use lowrank::{random_rank_r_error, rank_r_least_squares_error};
pub use svd::{svd, svd_labeled, truncate_rank, SvdFactors, SVD_MAX_SWEEPS, SVD_TOLERANCE};

use std::fmt;

use crate::error::{Error, Result};

/// Storage scalar for [`Dense`].
pub trait Element: Copy + PartialEq + Default + fmt::Debug + Send + Sync + 'static {
    const ZERO: Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Row-major dense matrix. All entries are finite.
#[derive(Clone, PartialEq)]
pub struct Dense<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Weight storage: 32-bit entries.
pub type Matrix = Dense<f32>;
/// Working precision for activations, factors and the theory validator.
pub type Matrix64 = Dense<f64>;

/// Which axis a neuron mask selects along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Rows,
    Cols,
}

impl<T: Element> fmt::Debug for Dense<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Dense {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl<T: Element> Dense<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::ZERO; rows * cols] }
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Param(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Param(format!("non-finite entry at ({}, {})", pos / cols.max(1), pos % cols.max(1))));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a generator. Panics if the generator produces a
    /// non-finite value; callers construct from arithmetic they control.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                assert!(v.is_finite(), "non-finite entry generated at ({r}, {c})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Param("ragged rows".into()));
        }
        Self::from_vec(n, m, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::from_f64(1.0) } else { T::ZERO })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Sets one entry. Panics on a non-finite value.
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        assert!(v.is_finite(), "non-finite entry written at ({r}, {c})");
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite entry");
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| T::from_f64(v.to_f64() * s))
    }

    pub fn to_f64(&self) -> Matrix64 {
        Dense { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v.to_f64()).collect() }
    }

    /// Rounds to 32-bit storage.
    pub fn to_f32(&self) -> Matrix {
        let data: Vec<f32> = self.data.iter().map(|v| v.to_f64() as f32).collect();
        assert!(data.iter().all(|v| v.is_finite()), "entry overflows f32");
        Dense { rows: self.rows, cols: self.cols, data }
    }

    /// `self · rhs`, accumulated in 64-bit.
    pub fn matmul<U: Element>(&self, rhs: &Dense<U>) -> Result<Matrix64> {
        if self.cols != rhs.rows {
            return Err(Error::Param(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0f64; self.rows * rhs.cols];
        for i in 0..self.rows {
            let acc = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.get(i, k).to_f64();
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *o += a * b.to_f64();
                }
            }
        }
        Ok(Dense { rows: self.rows, cols: rhs.cols, data: out })
    }

    /// Entrywise `self - rhs` in 64-bit.
    pub fn sub<U: Element>(&self, rhs: &Dense<U>) -> Result<Matrix64> {
        self.zip_with(rhs, |a, b| a - b)
    }

    /// Entrywise `self + rhs` in 64-bit.
    pub fn add<U: Element>(&self, rhs: &Dense<U>) -> Result<Matrix64> {
        self.zip_with(rhs, |a, b| a + b)
    }

    fn zip_with<U: Element>(&self, rhs: &Dense<U>, f: impl Fn(f64, f64) -> f64) -> Result<Matrix64> {
        if self.shape() != rhs.shape() {
            return Err(Error::Param(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a.to_f64(), b.to_f64())).collect();
        Ok(Dense { rows: self.rows, cols: self.cols, data })
    }

    /// Frobenius inner product `⟨self, rhs⟩`.
    pub fn dot<U: Element>(&self, rhs: &Dense<U>) -> Result<f64> {
        if self.shape() != rhs.shape() {
            return Err(Error::Param("inner product of differently shaped matrices".into()));
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(&a, &b)| a.to_f64() * b.to_f64()).sum())
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let x = v.to_f64();
                x * x
            })
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    /// Keeps the rows (or columns) listed in `indices` verbatim and writes an
    /// exact zero everywhere else.
    pub fn mask_to_neurons(&self, indices: &[usize], axis: Axis) -> Result<Self> {
        let extent = match axis {
            Axis::Rows => self.rows,
            Axis::Cols => self.cols,
        };
        let mut keep = vec![false; extent];
        for &i in indices {
            if i >= extent {
                return Err(Error::Param(format!("mask index {i} out of range for {axis:?} extent {extent}")));
            }
            keep[i] = true;
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let kept = match axis {
                    Axis::Rows => keep[r],
                    Axis::Cols => keep[c],
                };
                if kept {
                    out.data[r * self.cols + c] = self.data[r * self.cols + c];
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute entrywise difference, for tests and diagnostics.
    pub fn max_abs_diff<U: Element>(&self, rhs: &Dense<U>) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data.iter().zip(&rhs.data).map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max)
    }
}

impl Matrix {
    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

impl Matrix64 {
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// `√(Σ entries²)` with 64-bit accumulation.
pub fn frobenius_norm<T: Element>(m: &Dense<T>) -> f64 {
    m.frobenius_norm()
}

/// Free-function form of [`Dense::mask_to_neurons`].
pub fn mask_to_neurons<T: Element>(m: &Dense<T>, indices: &[usize], axis: Axis) -> Result<Dense<T>> {
    m.mask_to_neurons(indices, axis)
}
