//! Dense row-major tensors and matrices.
//!
//! `Tensor4` carries conv weights `(F, C, K1, K2)` and feature maps
//! `(N, C, H, W)`. Rank-3 objects use a unit leading axis.

use crate::error::{Error, Result};

/// Dense rank-4 tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("tensor contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut k = 0;
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    for d in 0..shape[3] {
                        t.data[k] = f([a, b, c, d]);
                        k += 1;
                    }
                }
            }
        }
        t
    }

    pub(crate) fn from_raw(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.shape;
        ((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: f64) {
        let k = self.offset(idx);
        self.data[k] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖ / ‖other‖`, or the absolute distance when `other` is zero.
    pub fn relative_error(&self, reference: &Tensor4) -> f64 {
        let d = self.distance(reference);
        let n = reference.frobenius_norm();
        if n == 0.0 {
            d
        } else {
            d / n
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("extents must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "extents must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            1.0,
            &self.data,
            false,
            &rhs.data,
            false,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// First `k` columns as a new matrix.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        assert!(k >= 1 && k <= self.cols);
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `c = alpha · op(a) · op(b) + beta · c` on row-major slices, where `a` is
/// `m×k` after the optional transpose and `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe in-bounds
    // row-major (or transposed) layouts of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_mode(mode: usize) -> Result<()> {
    if mode > 3 {
        return Err(Error::arg(format!("mode must be in 0..=3, got {mode}")));
    }
    Ok(())
}

/// Mode-`mode` unfolding. Columns enumerate the remaining axes in ascending
/// order, last axis fastest.
pub fn unfold(t: &Tensor4, mode: usize) -> Result<Matrix> {
    check_mode(mode)?;
    let shape = t.shape;
    let rows = shape[mode];
    let cols = t.len() / rows;
    let mut out = vec![0.0; t.len()];
    let rest: Vec<usize> = (0..4).filter(|&a| a != mode).collect();
    let mut idx = [0usize; 4];
    for (k, &v) in t.data.iter().enumerate() {
        let mut r = k;
        for a in (0..4).rev() {
            idx[a] = r % shape[a];
            r /= shape[a];
        }
        let col = (idx[rest[0]] * shape[rest[1]] + idx[rest[1]]) * shape[rest[2]] + idx[rest[2]];
        out[idx[mode] * cols + col] = v;
    }
    Ok(Matrix::from_raw(rows, cols, out))
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: [usize; 4]) -> Result<Tensor4> {
    check_mode(mode)?;
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
    }
    let len: usize = shape.iter().product();
    if m.rows != shape[mode] || m.rows * m.cols != len {
        return Err(Error::shape(format!(
            "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
            m.rows, m.cols
        )));
    }
    let rest: Vec<usize> = (0..4).filter(|&a| a != mode).collect();
    let mut out = vec![0.0; len];
    let mut idx = [0usize; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut r = k;
        for a in (0..4).rev() {
            idx[a] = r % shape[a];
            r /= shape[a];
        }
        let col = (idx[rest[0]] * shape[rest[1]] + idx[rest[1]]) * shape[rest[2]] + idx[rest[2]];
        *slot = m.data[idx[mode] * m.cols + col];
    }
    Ok(Tensor4::from_raw(shape, out))
}

/// `t ×_mode m`: contracts axis `mode` of `t` with the columns of `m`.
pub fn mode_product(t: &Tensor4, m: &Matrix, mode: usize) -> Result<Tensor4> {
    check_mode(mode)?;
    if m.cols != t.shape[mode] {
        return Err(Error::shape(format!(
            "matrix has {} columns but mode {mode} has extent {}",
            m.cols, t.shape[mode]
        )));
    }
    let unfolded = unfold(t, mode)?;
    let product = m.matmul(&unfolded)?;
    let mut shape = t.shape;
    shape[mode] = m.rows;
    fold(&product, mode, shape)
}
