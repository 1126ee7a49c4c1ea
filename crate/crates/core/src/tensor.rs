//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense n-dimensional array of scalars, optionally carrying a gradient of
/// the same shape. Tensors live inside a [`crate::graph::Graph`] and are
/// addressed through [`crate::graph::TensorId`] handles.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>, requires_grad: bool) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("shape {:?} implies {} values, got {}", shape, expect, values.len()),
            });
        }
        Ok(Tensor { shape, values, requires_grad, grad: None })
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], values: vec![value], requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, values: vec![S::zero(); n], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }
}
