//! Dense rank-4 tensors and a reverse-mode autodiff tape.
//!
//! Every value in the network is a `[batch, channel, height, width]` array
//! stored row-major with the width axis fastest. Values are plain data
//! ([`Tensor`]); differentiation happens on a [`Tape`], which records each
//! operation as a node and hands out copyable [`Var`] handles.

mod gradcheck;
pub mod io;
pub mod kernels;
mod tape;

use std::fmt;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors raised by tensor construction, operations and differentiation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: non-positive output extent for input {input}")]
    EmptyOutput { op: &'static str, input: Shape },
    #[error("{op}: non-finite value in output of node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward: root must be a scalar, got {0}")]
    NonScalarRoot(Shape),
    #[error("backward: root does not depend on any tensor that requires grad")]
    Detached,
    #[error("backward: gradients already computed on this tape")]
    AlreadyBackpropagated,
    #[error("unknown variable handle {0}")]
    UnknownVar(usize),
    #[error("bce_loss: target contains non-binary value {0}")]
    NonBinaryTarget(f64),
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

/// Scalar width of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for strided row/column matrices.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// `m x k`, `k x n` and `m x n` matrices.
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
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

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
    const PRECISION: Precision = Precision::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

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

/// Shorthand for converting an `f64` literal into the graph's scalar type.
#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Extents `[n, c, h, w]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one `[h, w]` plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "[{n}, {c}, {h}, {w}]")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A rank-4 array. Immutable once handed to a tape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(shape, data.iter().map(|&v| lit(v)).collect())
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape.0;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// The single value of a `[1,1,1,1]` tensor (or the first element).
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        Self::from_vec(shape, self.data)
    }

    /// Slice out batch item `i` as a `[1, c, h, w]` tensor.
    pub fn batch_item(&self, i: usize) -> Tensor<T> {
        let per = self.shape.numel() / self.shape.n().max(1);
        Tensor {
            shape: Shape::new(1, self.shape.c(), self.shape.h(), self.shape.w()),
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                left: self.shape,
                right: other.shape,
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
