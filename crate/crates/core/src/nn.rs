//! Small layer wrappers over the tensor ops, shared by the backbone and the
//! autoencoder, plus the two optimizers used for training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tensor, TensorError};

/// Scaled-uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(data, shape).requires_grad(true)
}

pub struct Conv2dLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2dLayer {
        let fan_in = in_channels * k * k;
        Conv2dLayer {
            kernels: uniform_fan_in(rng, &[out_channels, in_channels, k, k], fan_in),
            bias: Tensor::zeros(&[out_channels]).requires_grad(true),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.conv2d(&self.kernels, &self.bias, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.kernels.clone(), self.bias.clone()]
    }
}

pub struct TransposedConv2dLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl TransposedConv2dLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> TransposedConv2dLayer {
        let fan_in = in_channels * k * k;
        TransposedConv2dLayer {
            kernels: uniform_fan_in(rng, &[in_channels, out_channels, k, k], fan_in),
            bias: Tensor::zeros(&[out_channels]).requires_grad(true),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.transposed_conv2d(&self.kernels, &self.bias, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.kernels.clone(), self.bias.clone()]
    }
}

pub struct LinearLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> LinearLayer {
        LinearLayer {
            weights: uniform_fan_in(rng, &[out_features, in_features], in_features),
            bias: Tensor::zeros(&[out_features]).requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.linear(&self.weights, &self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weights.clone(), self.bias.clone()]
    }
}

/// Stochastic gradient descent with classical momentum.
pub struct Sgd {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, learning_rate: f64, momentum: f64) -> Sgd {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Sgd {
            params,
            velocity,
            learning_rate,
            momentum,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        for (p, vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad() else { continue };
            p.update_data(|data| {
                for ((w, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                    *v = self.momentum * *v - self.learning_rate * g;
                    *w += *v;
                }
            });
        }
    }
}

/// Adaptive moment estimation over first and second gradient moments.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, learning_rate: f64) -> Adam {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in self.params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(grad) = p.grad() else { continue };
            p.update_data(|data| {
                for (((w, mi), vi), g) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
    }
}
