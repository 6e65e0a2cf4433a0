//! Dense numeric kernels: row-major matrices, 3-way tensors, seeded RNG and
//! parameter initialization.
//!
//! Every contraction runs with a fixed loop order so results are
//! bit-reproducible for a given build.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point element type. `f64` is used for gradient verification,
/// `f32` for training and checkpoints.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("cannot reshape {from:?} ({from_len} elements) into {to:?}")]
    Reshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
    },
    #[error("buffer of length {len} does not match shape {shape:?}")]
    BufferLength { len: usize, shape: Vec<usize> },
    #[error("dimension `{name}` must be at least 1")]
    ZeroDim { name: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::BufferLength {
                len: data.len(),
                shape: vec![rows, cols],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::BufferLength {
                    len: row.len(),
                    shape: vec![rows.len(), cols],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
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

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Mat<T>) -> Result<Mat<T>> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Mat<T>) -> Result<Mat<T>> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Mat<T>> {
        if rows * cols != self.data.len() {
            return Err(TensorError::Reshape {
                from: self.shape().to_vec(),
                from_len: self.data.len(),
                to: vec![rows, cols],
            });
        }
        Ok(Mat {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    pub fn reshape_to_tensor3(&self, d1: usize, d2: usize, d3: usize) -> Result<Tensor3<T>> {
        if d1 * d2 * d3 != self.data.len() {
            return Err(TensorError::Reshape {
                from: self.shape().to_vec(),
                from_len: self.data.len(),
                to: vec![d1, d2, d3],
            });
        }
        Ok(Tensor3 {
            d1,
            d2,
            d3,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: cast_slice(&self.data),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Xavier-uniform initialization with `fan_in = rows`, `fan_out = cols`.
    pub fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(rows, cols);
        uniform_fill(&mut m.data, xavier_bound(rows, cols), rng);
        m
    }
}

/// Dense 3-way tensor stored `d1`-major: element `(i, j, k)` lives at
/// `(i * d2 + j) * d3 + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    d1: usize,
    d2: usize,
    d3: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self {
            d1,
            d2,
            d3,
            data: vec![T::zero(); d1 * d2 * d3],
        }
    }

    pub fn from_vec(d1: usize, d2: usize, d3: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != d1 * d2 * d3 {
            return Err(TensorError::BufferLength {
                len: data.len(),
                shape: vec![d1, d2, d3],
            });
        }
        Ok(Self { d1, d2, d3, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.d1, self.d2, self.d3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[(i * self.d2 + j) * self.d3 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        self.data[(i * self.d2 + j) * self.d3 + k] = v;
    }

    pub fn reshape_to_mat(&self, rows: usize, cols: usize) -> Result<Mat<T>> {
        reshape3_to_mat(self, rows, cols)
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            d1: self.d1,
            d2: self.d2,
            d3: self.d3,
            data: cast_slice(&self.data),
        }
    }
}

/// Reinterprets a 3-way tensor as a matrix without moving elements.
pub fn reshape3_to_mat<T: Real>(t: &Tensor3<T>, rows: usize, cols: usize) -> Result<Mat<T>> {
    if rows * cols != t.data.len() {
        return Err(TensorError::Reshape {
            from: t.shape().to_vec(),
            from_len: t.data.len(),
            to: vec![rows, cols],
        });
    }
    Ok(Mat {
        rows,
        cols,
        data: t.data.clone(),
    })
}

/// `y += a * x`.
#[inline]
pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// `out = x · m` for a row vector `x` (len `m.rows`).
pub fn vec_mat<T: Real>(x: &[T], m: &Mat<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.iter_mut().for_each(|v| *v = T::zero());
    for (r, &xr) in x.iter().enumerate() {
        axpy(xr, m.row(r), out);
    }
}

/// `out = m · y` for a column vector `y` (len `m.cols`).
pub fn mat_vec<T: Real>(m: &Mat<T>, y: &[T], out: &mut [T]) {
    debug_assert_eq!(y.len(), m.cols);
    debug_assert_eq!(out.len(), m.rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), y);
    }
}

/// `m += x^T y` (outer product accumulate).
pub fn add_outer<T: Real>(m: &mut Mat<T>, x: &[T], y: &[T]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(y.len(), m.cols);
    for (r, &xr) in x.iter().enumerate() {
        if xr != T::zero() {
            axpy(xr, y, m.row_mut(r));
        }
    }
}

pub fn cast_slice<T: Real, U: Real>(xs: &[T]) -> Vec<U> {
    xs.iter().map(|&v| U::lit(v.as_f64())).collect()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place log-softmax. Returns log-sum-exp of the input.
pub fn log_softmax_in_place<T: Real>(xs: &mut [T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in xs.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in xs.iter_mut() {
        *v -= lse;
    }
    lse
}

/// Seeded portable generator (ChaCha8). Every stochastic operation in the
/// crate draws from one of these.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Serializable position of a [`Rng`] stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: Vec<u8>,
    pub stream: u64,
    /// Word position as a decimal string (u128 is not JSON-safe).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            key: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<Rng> {
        let key: [u8; 32] = self.key.as_slice().try_into().ok()?;
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn uniform_fill<T: Real>(data: &mut [T], bound: f64, rng: &mut Rng) {
    for v in data.iter_mut() {
        *v = T::lit(rng.random_range(-bound..=bound));
    }
}

pub fn standard_normal_vec<T: Real>(n: usize, rng: &mut Rng) -> Vec<T> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect()
}
