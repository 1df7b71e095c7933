//! Dense `f64` tensors with a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Graph`], which records every executed op and replays them backwards
//! in [`Graph::backward`].

mod adam;
mod graph;
mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: graph is empty")]
    EmptyGraph,
    #[error("adam: non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array. A scalar has shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: "element count does not match data length",
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}
