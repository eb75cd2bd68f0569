//! Parameterised building blocks wired onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::graph::{ConvGeom, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Whether a forward pass trains (batch statistics, dropout) or infers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| dist.sample(rng)).collect()).expect("shape")
}

pub(crate) fn normal_init(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[outputs, inputs], inputs, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w, true)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Batch normalization over rows with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[features], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[features])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[features], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, Self::EPS)?;
                let m = Self::MOMENTUM;
                for (r, b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * b;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                g.fixed_norm(x, gamma, beta, &mean, &var, Self::EPS)
            }
        }
    }
}

/// Square-kernel convolution over token-layout feature maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform_init(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// `x` is `[batch * size * size, in_channels]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, size: usize) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(
            x,
            w,
            b,
            ConvGeom {
                batch,
                in_channels: self.in_channels,
                height: size,
                width: size,
                kernel: self.kernel,
                stride: self.stride,
                pad: self.pad,
            },
        )
    }
}

/// Inverted dropout; identity outside training or at rate 0.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if mode == Mode::Eval || rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    g.mask(x, mask)
}
