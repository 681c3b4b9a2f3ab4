//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they execute (a tape). Each node owns
//! its output, and [`Graph::backward`] replays the tape in reverse to
//! accumulate gradients into every node that requires them.

mod fft;
mod gemm;
mod graph;
pub mod ops;
mod scalar;

use thiserror::Error;

pub use graph::{Graph, NodeId};
pub use ops::conv::ConvAlgorithm;
pub use scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: zero-sized output: {detail}")]
    EmptyOutput { op: &'static str, detail: String },
    #[error("group_norm: {channels} channels cannot be split into {groups} groups")]
    InvalidGroups { channels: usize, groups: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not exist in this graph (was the forward pass run?)")]
    UnknownNode(usize),
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardAlreadyRun,
    #[error("cannot normalize a zero-norm row (row {row})")]
    ZeroNorm { row: usize },
    #[error("invalid tensor: {0}")]
    InvalidArgument(String),
}

/// Dense row-major tensor. 4-d feature maps use NCHW layout; a scalar has an
/// empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidArgument(format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::InvalidArgument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self { shape, values: vec![value; len] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), values: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.values.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), values: self.values.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}
