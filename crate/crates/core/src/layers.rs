//! Parameterised building blocks shared by the networks.

use lungsynth_autodiff::nn;
use lungsynth_autodiff::{Bound, ParamId, ParamStore, Tensor, Var};
use ndarray::{Array, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Array::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        );
        let bias = store.add(
            format!("{name}.bias"),
            init_uniform(rng, &[out_channels], fan_in),
        );
        Conv {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        nn::conv2d(x, p.get(self.weight), Some(p.get(self.bias)), self.stride, self.pad)
    }

    pub fn out_dim(&self, input: usize) -> usize {
        nn::conv_out_dim(input, self.kernel, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[out_features, in_features], in_features),
        );
        let bias = store.add(
            format!("{name}.bias"),
            init_uniform(rng, &[out_features], in_features),
        );
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        nn::linear(x, p.get(self.weight), Some(p.get(self.bias)))
    }
}

/// Learnable per-channel scale and shift, initialised to identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[channels])));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[channels])));
        Affine { gamma, beta }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        nn::channel_affine(x, p.get(self.gamma), p.get(self.beta))
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
