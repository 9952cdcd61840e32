//! Dense row-major matrices and the scalar types they are generic over.
//!
//! Every quantity in the game (logits, one-hots, hidden states, losses) is a
//! `rows x cols` matrix; a batch of episodes occupies the rows.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point type a [`Tensor`] can hold.
///
/// Training runs in `f32`; `f64` exists so that gradient checks can be run
/// through exactly the same code at a precision where central differences
/// are meaningful.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers must address matrices of the given shape and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A `rows x cols` matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: [usize; 2],
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor of shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self {
            shape: [rows, cols],
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            shape: [rows, cols],
            values: vec![value; rows * cols],
        }
    }

    /// A single row vector.
    pub fn row(values: Vec<T>) -> Self {
        Self {
            shape: [1, values.len()],
            values,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: [1, 1],
            values: vec![value],
        }
    }

    /// Rows of one-hot vectors of width `cols`.
    pub fn one_hot_rows(indices: &[usize], cols: usize) -> Self {
        let mut t = Self::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            t.values[r * cols + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            shape: [rows.len(), cols],
            values: rows.concat(),
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.shape[1];
        &mut self.values[r * c..(r + 1) * c]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> Option<T> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// Index of the largest entry in each row, lowest index on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| argmax(self.row_slice(r)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
        }
    }

    /// Matrix product `self @ other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.shape;
        let [k2, n] = other.shape;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {m}x{k} @ {k2}x{n} has mismatched inner dimension"
            )));
        }
        let mut out = Self::zeros(m, n);
        gemm_into(self, false, other, false, &mut out, T::zero());
        Ok(out)
    }
}

/// `out = op(a) @ op(b) + beta * out` where `op` optionally transposes.
pub(crate) fn gemm_into<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    out: &mut Tensor<T>,
    beta: T,
) {
    let (m, k, rsa, csa) = if ta {
        (a.cols(), a.rows(), 1, a.cols() as isize)
    } else {
        (a.rows(), a.cols(), a.cols() as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (b.cols(), b.rows(), 1, b.cols() as isize)
    } else {
        (b.rows(), b.cols(), b.cols() as isize, 1)
    };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.shape, [m, n], "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: shapes and strides were derived from the owning tensors above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.values.as_ptr(),
            rsa,
            csa,
            b.values.as_ptr(),
            rsb,
            csb,
            beta,
            out.values.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index of the maximum, lowest index on ties. Empty input returns 0.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one vector.
pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn one_hot<T: Scalar>(index: usize, len: usize) -> Vec<T> {
    let mut v = vec![T::zero(); len];
    v[index] = T::one();
    v
}
