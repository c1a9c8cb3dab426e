//! Dense tensors and a small define-by-run reverse-mode engine.
//!
//! Feature grids are rank-3 `(H, W, C)` tensors stored cell-major, so a 1×1
//! convolution is a `(H·W × Cin) · (Cin × Cout)` product. There is no
//! broadcasting: every elementwise op requires identical shapes.

mod graph;
mod io;
mod optim;
mod param;

use std::fmt::Debug;

pub use graph::{Graph, Reduction, Var};
pub use io::{read_container, write_container, Container, ContainerError};
pub use optim::Sgd;
pub use param::{ParamId, ParamStore, ParamTensor};

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar: num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self.into()
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// A rank-3 `(H, W, C)` tensor.
pub type FeatureGrid<T = f32> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn grid(h: usize, w: usize, c: usize) -> Self {
        Self::zeros(&[h, w, c])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(H, W, C)` of a rank-3 tensor.
    ///
    /// # Panics
    /// If the tensor is not rank 3.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a rank-3 grid, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// Number of channels (last axis).
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of cells (all axes but the last).
    pub fn cells(&self) -> usize {
        self.data.len() / self.channels().max(1)
    }

    pub fn get3(&self, r: usize, c: usize, ch: usize) -> T {
        let (_, w, cc) = self.dims3();
        self.data[(r * w + c) * cc + ch]
    }

    pub fn set3(&mut self, r: usize, c: usize, ch: usize, v: T) {
        let (_, w, cc) = self.dims3();
        self.data[(r * w + c) * cc + ch] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Channels `[start, start + len)` of every cell.
    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let c = self.channels();
        assert!(start + len <= c, "channel slice out of range");
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        let data = self.data.chunks_exact(c).flat_map(|cell| cell[start..start + len].iter().copied()).collect();
        Self { shape, data }
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }
}

pub(crate) fn ensure_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() });
    }
    Ok(())
}
