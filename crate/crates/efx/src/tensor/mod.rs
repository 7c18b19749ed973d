//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! [`Tensor`] is plain storage (shape + values + an optional gradient
//! accumulator). All differentiable computation goes through a [`Graph`],
//! which records every operation as it runs and replays the recording in
//! reverse on [`Graph::backward`]. A graph lives for one forward/backward
//! pass; parameters persist outside it as `Tensor`s and are re-inserted as
//! leaves each pass, which keeps recurrent rollouts of any length simple.
//!
//! Everything is generic over the element type: `f32` for training, `f64`
//! for finite-difference verification.

mod graph;
mod kernels;
pub mod optim;

pub use graph::{Graph, PaddingMode, Var};

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Element dtype tag, mirrored in the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Scalar types the engine computes with.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Debug + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
///
/// Immutable after construction apart from the gradient accumulator filled
/// in by [`crate::tensor::Graph`] teardown helpers and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dim(
                "tensor",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// Marks this tensor as a trainable leaf and allocates its accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![E::zero(); self.data.len()]);
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [E]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(E::zero());
        }
    }

    pub fn set_grad(&mut self, grad: Vec<E>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Element accessor for small tensors in tests and reports.
    pub fn at(&self, idx: &[usize]) -> E {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of range for axis {i} of {:?}", self.shape);
            flat = flat * d + x;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Converts element type, e.g. an `f32` frame to `f64` for oracles.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

pub(crate) fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
