//! Minimal neural-network layers with explicit forward/backward passes.
//!
//! Layers cache whatever the backward pass needs during a training-mode
//! forward; backward must be called in reverse order of the forwards that
//! produced the caches. Everything is generic over the float type so the
//! same code trains in f32 and gradient-checks in f64.

mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::{Conv2d, ConvBlock};
pub use linear::{softmax, Linear};
pub use norm::BatchNorm2d;
pub use pool::{AvgPool2x2Stride1, GlobalAvgPool, MaxPool2, Relu2, Relu4, UpsampleNearest2};

use ndarray::{Array, ArrayD, Dimension, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Float element the network computes in.
pub trait Scalar: NdFloat + num_traits::FromPrimitive + std::iter::Sum {
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Whether a forward pass uses batch statistics and caches for backward
/// (training) or running statistics with no caching (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Visitor over all parameters of a module tree, keyed by a stable path.
pub trait Module<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

/// Fan-in scaled uniform init (He-style), deterministic under the rng.
pub fn init_weight<F: Scalar, D: Dimension>(
    rng: &mut ChaCha8Rng,
    shape: D,
    fan_in: usize,
) -> Array<F, D> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Array::from_shape_simple_fn(shape, || F::of_f64(rng.gen_range(-bound..bound)))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
