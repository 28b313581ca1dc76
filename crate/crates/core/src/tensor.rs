//! Dense row-major arrays, the value type carried through the compute graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("embedding lookup: id {id} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { id: usize, vocab: usize },
    #[error("slice_last_axis: empty or invalid range {lo}..{hi} on axis of length {axis}")]
    InvalidSlice { lo: usize, hi: usize, axis: usize },
    #[error("{op}: every position is masked out; the mean is undefined")]
    AllMasked { op: &'static str },
    #[error("backward: graph already consumed; re-run forward before calling backward again")]
    GraphConsumed,
    #[error("backward: node is not a scalar (shape {shape:?})")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Dense multidimensional array in row-major order.
///
/// A rank-0 tensor (empty shape) holds exactly one element and is used for
/// scalar loss values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, KernelError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(KernelError::InvalidArgument(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// 2-D tensor from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, KernelError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(KernelError::InvalidArgument(
                    "ragged rows in tensor literal".into(),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single element of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor with {:?}", self.shape);
        self.data[0]
    }

    /// Length of the last axis; 1 for rank-0 tensors.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self, KernelError> {
        Tensor::new(shape, data.iter().map(|&x| S::from_f64(x)).collect())
    }
}
