//! Dense tensors and a reverse-mode automatic-differentiation engine.
//!
//! The engine is deliberately small: tensors are contiguous row-major
//! buffers, and differentiation happens on a [`Graph`] tape that records
//! operations in the order they execute. Everything is generic over the
//! [`Real`] scalar so the same operator code runs in `f32` for training and
//! in `f64` for finite-difference verification.
//!
//! Determinism note: every reduction in this module (convolutions, matrix
//! products, pooling, normalizations) accumulates in a fixed ascending index
//! order, so results are bit-identical across runs on the same platform.

mod adam;
mod conv;
mod graph;
mod gradcheck;
mod hist;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport, DEFAULT_STEP};
pub use graph::{BatchStats, Graph, Var};

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar abstraction: the float operations the engine needs, implemented by
/// `f32` and `f64`.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Sum + Send + Sync + Debug + Display + 'static
{
    /// Lossy conversion from `f64` (rounds to nearest for `f32`).
    fn of(v: f64) -> Self;
    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense row-major tensor with an explicit shape.
///
/// The shape may have any rank; rank-4 tensors use the `[batch, channel,
/// height, width]` convention throughout the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    /// Build a tensor from a shape and matching flat data.
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
        }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], value: R) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A scalar (single-element, rank-0) tensor.
    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// The shape as a slice.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat data, row-major.
    pub fn data(&self) -> &[R] {
        &self.data
    }

    /// Mutable flat data, row-major.
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    /// Consume the tensor, returning its flat data.
    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<R> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() requires a single-element tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Interpret as `[batch, channel, height, width]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() == 4 {
            Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
        } else {
            Err(Error::Shape(format!(
                "expected a rank-4 [B,C,H,W] tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Interpret as a `[rows, cols]` matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::Shape(format!(
                "expected a rank-2 matrix, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Same data, new shape (element counts must match).
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Elementwise cast to another scalar type.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| S::of(v.as_f64())).collect(),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements, accumulated in ascending index order.
    pub fn sum(&self) -> R {
        let mut acc = R::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    /// Build from an `f64` slice (used by tests and fixed constants).
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| R::of(v)).collect())
    }
}

/// A named, owned model weight with its accumulated gradient.
///
/// Parameters live outside any [`Graph`]; a training step registers them on
/// a fresh graph with [`Graph::param`], runs backward, then routes the
/// harvested gradients back here by name. Non-trainable parameters (e.g.
/// batchnorm running statistics) still ride along for checkpointing but are
/// skipped by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    pub trainable: bool,
}

impl<R: Real> Parameter<R> {
    pub fn new(name: impl Into<String>, value: Tensor<R>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    /// Reset the accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = R::zero();
        }
    }

    /// Add a gradient contribution (shapes must match).
    pub fn accumulate_grad(&mut self, g: &Tensor<R>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter {} shape {:?}",
                g.shape(),
                self.name,
                self.value.shape()
            )));
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a = *a + *b;
        }
        Ok(())
    }
}
