//! Dense row-major `f64` matrices and the handful of kernels the models need.
//!
//! Every kernel computes output rows independently and in a fixed order, so a
//! row's value never depends on how many other rows are in the batch. The
//! speculative engine relies on this to make cached, batched and tree-masked
//! forwards bit-identical to one-token-at-a-time decoding.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(0, cols);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "row of length {} pushed onto matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn append(&mut self, other: &Matrix) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = other.cols;
        }
        if other.cols != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "appending {} columns onto {}",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn truncate_rows(&mut self, rows: usize) {
        if rows < self.rows {
            self.rows = rows;
            self.data.truncate(rows * self.cols);
        }
    }

    /// Rows `0..keep_prefix` stay; the rows after it are replaced by `extra`
    /// (indices relative to `keep_prefix`), in the given order.
    pub fn compact_rows(&mut self, keep_prefix: usize, extra: &[usize]) {
        let cols = self.cols;
        let mut data = Vec::with_capacity((keep_prefix + extra.len()) * cols);
        data.extend_from_slice(&self.data[..keep_prefix * cols]);
        for &r in extra {
            let src = keep_prefix + r;
            data.extend_from_slice(&self.data[src * cols..(src + 1) * cols]);
        }
        self.rows = keep_prefix + extra.len();
        self.data = data;
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self (n×k) · w (k×m)`.
    pub fn matmul(&self, w: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, w.rows);
        let mut out = Matrix::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            let x = self.row(i);
            let o = &mut out.data[i * w.cols..(i + 1) * w.cols];
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                axpy(o, xk, w.row(k));
            }
        }
        out
    }

    /// `self (n×m) · wᵀ` where `w` is `k×m`; result is `n×k`.
    pub fn matmul_t(&self, w: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, w.cols);
        let mut out = Matrix::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let x = self.row(i);
            for k in 0..w.rows {
                out.data[i * w.rows + k] = dot(x, w.row(k));
            }
        }
        out
    }

    /// Accumulates `selfᵀ · dy` into `acc` (`k×m`), used for weight gradients.
    pub fn accumulate_t_matmul(&self, dy: &Matrix, acc: &mut Matrix) {
        debug_assert_eq!(self.rows, dy.rows);
        debug_assert_eq!(acc.rows, self.cols);
        debug_assert_eq!(acc.cols, dy.cols);
        for i in 0..self.rows {
            let d = dy.row(i);
            for (k, &xk) in self.row(i).iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                axpy(&mut acc.data[k * acc.cols..(k + 1) * acc.cols], xk, d);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
