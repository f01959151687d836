//! Parameterized layer wrappers over the raw tensor ops.
//!
//! Each layer owns named [`Parameter`]s; initialization draws from a
//! substream keyed by the parameter name, so weights depend only on
//! (seed, name) and never on construction order.

use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::ops::{self, BatchNormState, Mode};
use crate::tensor::{HasParams, Parameter, Scalar, Tensor};

fn init_normal<T: Scalar>(rng: &RngStream, name: &str, shape: &[usize], std: f64) -> Parameter<T> {
    let mut r = rng.substream(name);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(r.normal() * std)).collect();
    Parameter::new(name, Tensor::from_vec(shape, data).unwrap())
}

fn init_const<T: Scalar>(name: &str, shape: &[usize], value: f64) -> Parameter<T> {
    Parameter::new(name, Tensor::full(shape, T::from_f64(value)))
}

/// Square-kernel convolution layer with He fan-in initialization.
pub struct Conv2dLayer<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &RngStream,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2dLayer {
            weight: init_normal(
                rng,
                &format!("{prefix}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                std,
            ),
            bias: init_const(&format!("{prefix}.bias"), &[out_channels], 0.0),
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(&x.clone(), &self.weight.value, &self.bias.value, self.stride, self.padding)
    }
}

impl<T: Scalar> HasParams<T> for Conv2dLayer<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Fully connected layer, y = xW + b.
pub struct LinearLayer<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, rng: &RngStream) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        LinearLayer {
            weight: init_normal(rng, &format!("{prefix}.weight"), &[in_dim, out_dim], std),
            bias: init_const(&format!("{prefix}.bias"), &[out_dim], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight.value, &self.bias.value)
    }
}

impl<T: Scalar> HasParams<T> for LinearLayer<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Batch norm layer with learnable affine and f64 running statistics.
pub struct BatchNorm1dLayer<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub state: BatchNormState,
    /// Base name, used to address the running buffers in checkpoints.
    pub prefix: String,
}

impl<T: Scalar> BatchNorm1dLayer<T> {
    pub fn new(prefix: &str, dim: usize) -> Self {
        BatchNorm1dLayer {
            gamma: init_const(&format!("{prefix}.gamma"), &[dim], 1.0),
            beta: init_const(&format!("{prefix}.beta"), &[dim], 0.0),
            state: BatchNormState::new(dim, 0.1, 1e-5),
            prefix: prefix.to_string(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ops::batch_norm_1d(x, &self.gamma.value, &self.beta.value, &self.state, mode)
    }
}

impl<T: Scalar> HasParams<T> for BatchNorm1dLayer<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Per-channel batch norm over feature maps.
pub struct BatchNorm2dLayer<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub state: BatchNormState,
    pub prefix: String,
}

impl<T: Scalar> BatchNorm2dLayer<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: init_const(&format!("{prefix}.gamma"), &[channels], 1.0),
            beta: init_const(&format!("{prefix}.beta"), &[channels], 0.0),
            state: BatchNormState::new(channels, 0.1, 1e-5),
            prefix: prefix.to_string(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ops::batch_norm_2d(x, &self.gamma.value, &self.beta.value, &self.state, mode)
    }
}

impl<T: Scalar> HasParams<T> for BatchNorm2dLayer<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
