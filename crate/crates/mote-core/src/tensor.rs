//! Row-major matrix storage and the handful of dense kernels everything
//! else is built from.
//!
//! Floating point work is generic over [`Scalar`] so the same forward and
//! backward code runs in f32 for training and in f64 for the gradient
//! oracles. Reduction order inside every kernel is fixed, so outputs are
//! reproducible bit for bit regardless of worker count.

use crate::parallel;
use num_traits::{Float, NumCast};
use std::fmt;

/// Floating point element type for model math.
pub trait Scalar:
    Float + NumCast + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Shorthand for casting an f64 constant into this type.
    fn c(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite constant")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major matrix. Also used with integer element types for code
/// storage, hence the loose bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the rows selected by `idx` into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix<T> {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        self.map(|v| U::c(v.f64()))
    }
}

/// Fixed-order dot product with eight independent accumulators. The split
/// keeps the compiler free to vectorize while pinning the summation tree.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut s = [T::zero(); 8];
    let main = n - n % 8;
    let mut i = 0;
    while i < main {
        s[0] = s[0] + a[i] * b[i];
        s[1] = s[1] + a[i + 1] * b[i + 1];
        s[2] = s[2] + a[i + 2] * b[i + 2];
        s[3] = s[3] + a[i + 3] * b[i + 3];
        s[4] = s[4] + a[i + 4] * b[i + 4];
        s[5] = s[5] + a[i + 5] * b[i + 5];
        s[6] = s[6] + a[i + 6] * b[i + 6];
        s[7] = s[7] + a[i + 7] * b[i + 7];
        i += 8;
    }
    let mut tail = T::zero();
    while i < n {
        tail = tail + a[i] * b[i];
        i += 1;
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7])) + tail
}

/// y += alpha * x
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn add_assign<T: Scalar>(y: &mut Matrix<T>, x: &Matrix<T>) {
    assert_eq!(y.shape(), x.shape(), "add_assign shape");
    for (yi, &xi) in y.data.iter_mut().zip(x.data.iter()) {
        *yi = *yi + xi;
    }
}

pub fn scale_assign<T: Scalar>(y: &mut Matrix<T>, s: T) {
    for v in y.data.iter_mut() {
        *v = *v * s;
    }
}

/// y = a @ b^T for a: n x k, b: m x k.
///
/// Weights live as (out, in) rows, so this is the forward kernel: both
/// operands are walked along contiguous rows.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols(), b.cols(), "matmul_nt inner dim");
    let (n, m) = (a.rows(), b.rows());
    let mut out = Matrix::zeros(n, m);
    parallel::for_each_row(out.data_mut(), m, |t, row| {
        let ar = a.row(t);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    });
    out
}

/// y = a @ b for a: n x m, b: m x k.
pub fn matmul_nn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols(), b.rows(), "matmul_nn inner dim");
    let (n, m) = (a.rows(), a.cols());
    let mut out = Matrix::zeros(n, b.cols());
    let k = b.cols();
    parallel::for_each_row(out.data_mut(), k, |t, row| {
        let ar = a.row(t);
        for j in 0..m {
            let c = ar[j];
            if c != T::zero() {
                axpy(c, b.row(j), row);
            }
        }
    });
    out
}

/// out += a^T @ b for a: n x m, b: n x k, out: m x k.
///
/// This is the weight-gradient kernel; it accumulates in place.
pub fn matmul_tn_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    assert_eq!(a.rows(), b.rows(), "matmul_tn_acc outer dim");
    assert_eq!(out.shape(), (a.cols(), b.cols()), "matmul_tn_acc out shape");
    let n = a.rows();
    let k = b.cols();
    let m = a.cols();
    parallel::for_each_row(out.data_mut(), k, |r, orow| {
        for t in 0..n {
            let c = a.data[t * m + r];
            if c != T::zero() {
                axpy(c, b.row(t), orow);
            }
        }
    });
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu / dx at x.
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Max-subtracted softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    debug_assert!(!row.is_empty());
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax_first<T: PartialOrd + Copy>(row: &[T]) -> usize {
    debug_assert!(!row.is_empty());
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
