//! Layer building blocks with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs when `train` is set on
//! forward, and accumulates parameter gradients into its [`Param`]s.

mod cbam;
mod layers;
mod resample;

pub use cbam::Cbam;
pub use layers::{Conv2d, DepthwiseConv2d, Gelu, LayerNorm2d, Relu};
pub use resample::{upsample2x_backward, upsample2x_forward};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Scalar;

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Visitor access to every parameter of a layer tree, with dotted names.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

/// Join two name segments with a dot, skipping an empty prefix.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight initialisation scheme for convolution kernels. Biases start at zero.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Normal { std: f64 },
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    HeNormal,
}

impl Default for Init {
    fn default() -> Self {
        Init::HeNormal
    }
}

impl Init {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, fan_in: usize, len: usize, rng: &mut R) -> Vec<T> {
        let std = match *self {
            Init::Normal { std } => std,
            Init::HeNormal => (2.0 / fan_in.max(1) as f64).sqrt(),
        };
        let dist = Normal::new(0.0, std).expect("finite init std");
        (0..len).map(|_| T::from_f64(dist.sample(rng))).collect()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
