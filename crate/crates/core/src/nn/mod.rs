//! Minimal layer-wise neural network engine.
//!
//! Every layer owns its parameters and caches whatever its backward pass
//! needs during a training-mode forward pass. Backward passes accumulate into
//! `Param::grad` and return the gradient with respect to the layer input.
//! Everything is generic over [`Float`] so the same networks run in `f32` for
//! training and in `f64` for finite-difference gradient checks.
//!
//! Convolutional tensors use the `(N, C, D, H, W)` layout throughout. 2D
//! networks are expressed as 3D ones with a unit depth axis.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod optim;
mod pool;

pub use activation::{Dropout, Relu};
pub use conv::Conv3d;
pub use linear::Linear;
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use norm::BatchNorm3d;
pub use optim::{Adam, AdamConfig};
pub use pool::{AdaptiveMaxPool3d, GlobalAvgPool};

use std::fmt;

use ndarray::{Array5, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Scalar type the engine computes in.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag used in serialized tensor containers.
    const DTYPE: &'static str;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const DTYPE: &'static str = "f32le";

    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "f64le";

    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Forward-pass behaviour of stochastic and normalizing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, active dropout, caches kept for backward.
    Train,
    /// Running statistics, no dropout, no caches.
    Eval,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error in {stage}: expected {expected}, got {actual}")]
    Shape {
        stage: String,
        expected: String,
        actual: String,
    },
    #[error("backward called on {0} without a training-mode forward pass")]
    NoCache(&'static str),
}

impl NnError {
    pub fn shape(stage: impl Into<String>, expected: impl fmt::Display, actual: impl fmt::Display) -> Self {
        NnError::Shape {
            stage: stage.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Re-labels the stage of a shape error, leaving other errors untouched.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            NnError::Shape {
                stage: inner,
                expected,
                actual,
            } => NnError::Shape {
                stage: format!("{stage}/{inner}"),
                expected,
                actual,
            },
            other => other,
        }
    }
}

pub type NnResult<T> = Result<T, NnError>;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Float> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialization with the given fan-in.
    pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::cast(normal.sample(rng))).collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Anything that owns parameters and (optionally) non-trainable buffers.
///
/// Visiting order is stable and defines the layout of checkpoints and
/// optimizer state.
pub trait Module<F: Float> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {}

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Conv → batch norm → ReLU, the workhorse unit of both architectures.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<F> {
    pub conv: Conv3d<F>,
    pub bn: BatchNorm3d<F>,
    pub relu: Relu,
}

impl<F: Float> ConvBnRelu<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv3d::new(in_channels, out_channels, kernel, stride, padding, false, rng),
            bn: BatchNorm3d::new(out_channels),
            relu: Relu::new(),
        }
    }

    pub fn output_shape(&self, input: [usize; 5]) -> [usize; 5] {
        self.conv.output_shape(input)
    }

    pub fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode);
        Ok(self.relu.forward(y, mode))
    }

    pub fn backward(&mut self, grad: Array5<F>) -> NnResult<Array5<F>> {
        let g = self.relu.backward(grad)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl<F: Float> Module<F> for ConvBnRelu<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }
}

/// A chain of [`ConvBnRelu`] units applied in order.
#[derive(Debug, Clone, Default)]
pub struct ConvStack<F> {
    pub units: Vec<ConvBnRelu<F>>,
}

impl<F: Float> ConvStack<F> {
    pub fn new(units: Vec<ConvBnRelu<F>>) -> Self {
        Self { units }
    }

    pub fn output_shape(&self, mut shape: [usize; 5]) -> [usize; 5] {
        for u in &self.units {
            shape = u.output_shape(shape);
        }
        shape
    }

    pub fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let mut units = self.units.iter_mut();
        let Some(first) = units.next() else {
            return Ok(x.clone());
        };
        let mut y = first.forward(x, mode)?;
        for u in units {
            y = u.forward(&y, mode)?;
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: Array5<F>) -> NnResult<Array5<F>> {
        let mut g = grad;
        for u in self.units.iter_mut().rev() {
            g = u.backward(g)?;
        }
        Ok(g)
    }
}

impl<F: Float> Module<F> for ConvStack<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Concatenates `(N, C_i, D, H, W)` tensors along the channel axis.
pub fn concat_channels<F: Float>(parts: &[Array5<F>]) -> NnResult<Array5<F>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|_| {
        let shapes: Vec<_> = parts.iter().map(|p| format!("{:?}", p.shape())).collect();
        NnError::shape("channel concat", "matching N, D, H, W", shapes.join(" + "))
    })
}

/// Inverse of [`concat_channels`] for gradients: splits channel blocks of
/// the given widths.
pub fn split_channels<F: Float>(grad: &Array5<F>, widths: &[usize]) -> NnResult<Vec<Array5<F>>> {
    let total: usize = widths.iter().sum();
    if grad.len_of(Axis(1)) != total {
        return Err(NnError::shape("channel split", total, grad.len_of(Axis(1))));
    }
    let mut start = 0;
    Ok(widths
        .iter()
        .map(|&w| {
            let part = grad
                .slice_axis(Axis(1), ndarray::Slice::from(start..start + w))
                .to_owned();
            start += w;
            part
        })
        .collect())
}
