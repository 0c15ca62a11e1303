//! Dense row-major matrices and the handful of kernels the transformer needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// A row-major `rows x cols` matrix of `f64`. Vectors are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(alloc::format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng::normal(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(alloc::format!(
                "cannot add {:?} into {:?}",
                other.shape(),
                self.shape()
            )));
        }
        axpy(scale, &other.data, &mut self.data);
        Ok(())
    }

    /// `self * other` as a new tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(alloc::format!(
                "cannot multiply {:?} by {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_acc(
            &self.data,
            self.rows,
            self.cols,
            &other.data,
            other.cols,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// FNV-1a over the shape and the exact bit patterns of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.rows as u64);
        h.write_u64(self.cols as u64);
        for v in &self.data {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[t x n] += x[t x k] * w[k x n]`.
pub fn matmul_acc(x: &[f64], t: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), t * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), t * n);
    for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (xi, wr) in xr.iter().zip(w.chunks_exact(n)) {
            if *xi != 0.0 {
                axpy(*xi, wr, or);
            }
        }
    }
}

/// `dw[k x n] += x[t x k]^T * dy[t x n]`.
pub fn matmul_tn_acc(x: &[f64], dy: &[f64], t: usize, k: usize, n: usize, dw: &mut [f64]) {
    debug_assert_eq!(x.len(), t * k);
    debug_assert_eq!(dy.len(), t * n);
    debug_assert_eq!(dw.len(), k * n);
    for (xr, dyr) in x.chunks_exact(k).zip(dy.chunks_exact(n)) {
        for (xi, dwr) in xr.iter().zip(dw.chunks_exact_mut(n)) {
            if *xi != 0.0 {
                axpy(*xi, dyr, dwr);
            }
        }
    }
}

/// `dx[t x k] += dy[t x n] * w[k x n]^T`.
pub fn matmul_nt_acc(dy: &[f64], w: &[f64], t: usize, n: usize, k: usize, dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), t * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(dx.len(), t * k);
    for (dyr, dxr) in dy.chunks_exact(n).zip(dx.chunks_exact_mut(k)) {
        for (dxi, wr) in dxr.iter_mut().zip(w.chunks_exact(n)) {
            *dxi += dot(dyr, wr);
        }
    }
}

/// Numerical rank via Gaussian elimination with partial pivoting.
pub fn numerical_rank(m: &Tensor, tol: f64) -> usize {
    let (rows, cols) = m.shape();
    let mut a = m.data.clone();
    let scale = a
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let (pivot, best) = (rank..rows)
            .map(|r| (r, a[r * cols + c].abs()))
            .fold((rank, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= tol * scale {
            continue;
        }
        for j in 0..cols {
            a.swap(rank * cols + j, pivot * cols + j);
        }
        for r in rank + 1..rows {
            let f = a[r * cols + c] / a[rank * cols + c];
            for j in c..cols {
                a[r * cols + j] -= f * a[rank * cols + j];
            }
        }
        rank += 1;
    }
    rank
}
