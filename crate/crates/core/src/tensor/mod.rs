//! Dense f64 tensors stored flat in row-major order.

mod checkpoint;
mod gradcheck;
mod kernels;
mod store;
mod tape;

pub use checkpoint::{load_store, read_store, save_store, store_to_bytes, write_store, CheckpointError};
pub use gradcheck::{
    grad_check, BuildError, BuiltLoss, CoordReport, GradCheckConfig, GradCheckError,
    GradCheckReport,
};
pub use store::{BindError, Param, ParameterStore, StoreError};
pub use tape::{Gradients, PrimitiveOp, Tape, Var};

pub(crate) use kernels::{matmul_nn, matmul_nt, matmul_tn};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced non-finite value {value} at flat index {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: invalid argument, {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward was already run on this tape")]
    BackwardConsumed,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Row-major tensor of f64 values. Rank 0 is represented as shape `[]` with
/// one element; most code uses rank 1 and rank 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                detail: format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.data.len());
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::ShapeMismatch {
                op: "dims2",
                detail: format!("expected rank 2, got shape {:?}", other),
            }),
        }
    }
}

/// Rejects NaN and infinity anywhere in a freshly produced buffer.
pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op, index, value });
        }
    }
    Ok(())
}
