//! Dense kernels shared by the forward and backward passes.
//!
//! Every reduction runs left to right over its index range. Nothing here is
//! reassociated or fused, which is what lets the pruning equivalence checks
//! demand bit-identical results.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Scalar type of the numeric stack: `f32` by default, `f64` for gradient
/// checks.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    /// Name used in file manifests.
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major data; rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("non-finite entry at {pos}"),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Keeps the listed rows, in the order given.
    pub fn select_rows(&self, keep: &[usize]) -> Self {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &r in keep {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: keep.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the listed columns, in the order given.
    pub fn select_cols(&self, keep: &[usize]) -> Self {
        Self::from_fn(self.rows, keep.len(), |r, c| self.get(r, keep[c]))
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Standard matrix product. Each output entry accumulates over `k` in
/// ascending order.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(shape_err(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.cols {
            let mut acc = T::zero();
            for (k, &av) in arow.iter().enumerate() {
                acc += av * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `out = w · x` for `w: [out×in]`, accumulating over `in` in ascending
/// order. Lengths are the caller's responsibility.
#[inline]
pub fn matvec_into<T: Real>(w: &Matrix<T>, x: &[T], out: &mut [T]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(r), x);
    }
}

pub fn matvec<T: Real>(w: &Matrix<T>, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); w.rows];
    matvec_into(w, x, &mut out);
    out
}

/// `out += wᵀ · y`, used by the backward pass.
#[inline]
pub fn matvec_t_acc<T: Real>(w: &Matrix<T>, y: &[T], out: &mut [T]) {
    debug_assert_eq!(w.rows, y.len());
    debug_assert_eq!(w.cols, out.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(r)) {
            *o += wv * yr;
        }
    }
}

/// `g += scale · y ⊗ x` for a gradient matrix shaped like `w: [len(y)×len(x)]`.
#[inline]
pub fn outer_acc<T: Real>(g: &mut Matrix<T>, y: &[T], x: &[T], scale: T) {
    debug_assert_eq!(g.rows, y.len());
    debug_assert_eq!(g.cols, x.len());
    for (r, &yr) in y.iter().enumerate() {
        let s = yr * scale;
        if s == T::zero() {
            continue;
        }
        for (gv, &xv) in g.row_mut(r).iter_mut().zip(x) {
            *gv += s * xv;
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// SiLU gate nonlinearity, `x · sigmoid(x)`.
#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of [`silu`].
#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_matrix<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| silu(v)).collect(),
    }
}

/// RMS normalisation: `yᵢ = weightᵢ · (xᵢ / sqrt(mean(x²) + eps))`.
pub fn rmsnorm<T: Real>(x: &[T], weight: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != weight.len() {
        return Err(shape_err(
            "rmsnorm",
            format!("x[{}]", x.len()),
            format!("weight[{}]", weight.len()),
        ));
    }
    let mut out = vec![T::zero(); x.len()];
    rmsnorm_into(x, weight, eps, &mut out);
    Ok(out)
}

/// In-place variant of [`rmsnorm`]; returns the inverse RMS factor so the
/// backward pass can reuse it.
#[inline]
pub fn rmsnorm_into<T: Real>(x: &[T], weight: &[T], eps: T, out: &mut [T]) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss += v * v;
    }
    let n = T::from_f64(x.len() as f64);
    let inv = T::one() / (ss / n + eps).sqrt();
    for ((o, &xv), &wv) in out.iter_mut().zip(x).zip(weight) {
        *o = wv * (xv * inv);
    }
    inv
}

/// Softmax over a slice with max subtraction.
#[inline]
pub fn softmax_in_place<T: Real>(x: &mut [T]) {
    if x.is_empty() {
        return;
    }
    let mut max = x[0];
    for &v in x.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}
