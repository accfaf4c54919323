//! Dense-tensor layers with hand-written backward passes.
//!
//! The layer set is exactly what the encoder needs: 2-d convolution, batch
//! normalization, leaky ReLU, 2x2 max pooling, adaptive average pooling,
//! and an Adam optimizer. Every backward pass is checked against central
//! finite differences (see [`gradcheck`]).

mod activations;
mod adam;
mod batchnorm;
mod conv;
mod gradcheck;
#[cfg(test)]
mod gradtests;
mod pooling;

pub use activations::LeakyRelu;
pub use adam::Adam;
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use gradcheck::finite_diff_check;
pub use pooling::{AdaptiveAvgPool2d, MaxPool2x2};

use ndarray::{Array, Dimension};

/// Element type for all tensor math. `f32` is the training default,
/// `f64` is used by the gradient-check suite.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A named trainable tensor with its gradient and Adam moment slots.
#[derive(Debug, Clone)]
pub struct Param<T, D: Dimension> {
    pub name: String,
    pub value: Array<T, D>,
    pub grad: Array<T, D>,
    /// First-moment Adam slot.
    pub m: Array<T, D>,
    /// Second-moment Adam slot.
    pub v: Array<T, D>,
}

impl<T: Scalar, D: Dimension> Param<T, D> {
    pub fn zeros<Sh>(name: &str, shape: Sh) -> Self
    where
        Sh: ndarray::ShapeBuilder<Dim = D> + Clone,
    {
        Param {
            name: name.to_string(),
            value: Array::zeros(shape.clone()),
            grad: Array::zeros(shape.clone()),
            m: Array::zeros(shape.clone()),
            v: Array::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Flat mutable view of one parameter, used by the optimizer and checkpoints.
pub struct ParamView<'a, T> {
    pub name: &'a str,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
    pub m: &'a mut [T],
    pub v: &'a mut [T],
}

impl<T: Scalar, D: Dimension> Param<T, D> {
    pub fn as_view_mut(&mut self) -> ParamView<'_, T> {
        let shape = self.value.shape().to_vec();
        ParamView {
            name: &self.name,
            shape,
            value: self.value.as_slice_mut().expect("param is contiguous"),
            grad: self.grad.as_slice_mut().expect("param is contiguous"),
            m: self.m.as_slice_mut().expect("param is contiguous"),
            v: self.v.as_slice_mut().expect("param is contiguous"),
        }
    }
}

/// Anything that owns parameters exposes them through a visitor so the
/// optimizer and checkpoint code never need to know the layer structure.
pub trait HasParams<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>));
}
