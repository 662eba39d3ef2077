//! Linear, convolution and normalization layers.

use super::params::{Builder, Ctx, Init, Mode, ParamId};
use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// `y = x·W + b` over the last axis. `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = b.param("weight", &[in_dim, out_dim], Init::TruncatedNormal { std: 0.02 })?;
        let bias = if bias {
            Some(b.param("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let last = *ctx.graph.shape(x).last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects {} input features, got shape {:?}",
                self.in_dim,
                ctx.graph.shape(x)
            )));
        }
        let w = ctx.param(self.weight);
        let y = ctx.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) weights, zero bias.
    pub fn new(
        b: &mut Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let fan_out = kernel * kernel * out_channels / geom.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        Self::with_init(b, in_channels, out_channels, kernel, geom, Init::Normal { std })
    }

    pub fn with_init(
        b: &mut Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
        init: Init,
    ) -> Result<Self> {
        if in_channels % geom.groups != 0 || out_channels % geom.groups != 0 {
            return Err(Error::config(format!(
                "conv {in_channels}->{out_channels} not divisible into {} groups",
                geom.groups
            )));
        }
        let weight = b.param(
            "weight",
            &[out_channels, in_channels / geom.groups, kernel, kernel],
            init,
        )?;
        let bias = b.param("bias", &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geom,
        })
    }

    pub fn pointwise(b: &mut Builder, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(b, in_channels, out_channels, 1, ConvGeometry { stride: 1, padding: 0, groups: 1 })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.conv2d(x, w, Some(b), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("weight", &[dim], Init::Ones)?,
            beta: b.param("bias", &[dim], Init::Zeros)?,
            dim,
        })
    }

    /// Normalizes over the last axis, then applies `γ ⊙ x̂ + β`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(Error::shape(format!(
                "layer norm over {} channels got shape {shape:?}",
                self.dim
            )));
        }
        let axis = shape.len() - 1;
        let g = &mut ctx.graph;
        let mean = g.mean(x, &[axis])?;
        let var = g.variance(x, &[axis])?;
        let centered = g.sub(x, mean)?;
        let var_eps = g.add_scalar(var, LAYER_NORM_EPS);
        let inv_std = g.powf(var_eps, -0.5);
        let xhat = g.mul(centered, inv_std)?;
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let scaled = ctx.graph.mul(xhat, gamma)?;
        ctx.graph.add(scaled, beta)
    }
}

/// Single-device batch norm over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("weight", &[channels], Init::Ones)?,
            beta: b.param("bias", &[channels], Init::Zeros)?,
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels]))?,
            running_var: b.buffer("running_var", Tensor::ones(&[channels]))?,
            channels,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "batch norm over {} channels got shape {shape:?}",
                self.channels
            )));
        }
        let c = self.channels;
        let xhat = match ctx.mode() {
            Mode::Train => {
                let n = shape[0] * shape[2] * shape[3];
                if n < 2 {
                    return Err(Error::Numerical(format!(
                        "training-mode batch norm over {shape:?} has one value per channel; variance is degenerate"
                    )));
                }
                let g = &mut ctx.graph;
                let mean = g.mean(x, &[0, 2, 3])?;
                let var = g.variance(x, &[0, 2, 3])?;
                let (mean_v, var_v) = (g.value(mean).clone(), g.value(var).clone());
                let centered = g.sub(x, mean)?;
                let var_eps = g.add_scalar(var, BATCH_NORM_EPS);
                let inv_std = g.powf(var_eps, -0.5);
                let xhat = g.mul(centered, inv_std)?;

                let m = BATCH_NORM_MOMENTUM;
                let unbias = n as f64 / (n - 1) as f64;
                let old_mean = ctx.store().get(self.running_mean);
                let old_var = ctx.store().get(self.running_var);
                let new_mean = Tensor::from_fn(&[c], |i| {
                    (1.0 - m) * old_mean.data()[i] + m * mean_v.data()[i]
                });
                let new_var = Tensor::from_fn(&[c], |i| {
                    (1.0 - m) * old_var.data()[i] + m * var_v.data()[i] * unbias
                });
                ctx.push_running_update(self.running_mean, new_mean);
                ctx.push_running_update(self.running_var, new_var);
                xhat
            }
            Mode::Eval => {
                let rm = ctx.store().get(self.running_mean).reshape(&[1, c, 1, 1])?;
                let inv = ctx
                    .store()
                    .get(self.running_var)
                    .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
                    .reshape(&[1, c, 1, 1])?;
                let g = &mut ctx.graph;
                let rm = g.constant(rm);
                let inv = g.constant(inv);
                let centered = g.sub(x, rm)?;
                g.mul(centered, inv)?
            }
        };
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let g = &mut ctx.graph;
        let gamma = g.reshape(gamma, &[1, c, 1, 1])?;
        let beta = g.reshape(beta, &[1, c, 1, 1])?;
        let scaled = g.mul(xhat, gamma)?;
        g.add(scaled, beta)
    }
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(
        b: &mut Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut b.pp("conv"), in_channels, out_channels, kernel, geom)?,
            bn: BatchNorm2d::new(&mut b.pp("bn"), out_channels)?,
        })
    }

    pub fn pointwise(b: &mut Builder, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(b, in_channels, out_channels, 1, ConvGeometry { stride: 1, padding: 0, groups: 1 })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }

    pub fn forward_relu(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.forward(ctx, x)?;
        Ok(ctx.graph.relu(y))
    }
}

/// `[B, N, C]` tokens on an `h x w` grid to a `[B, C, h, w]` map.
pub fn tokens_to_map(ctx: &mut Ctx, x: Var, grid: (usize, usize)) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != grid.0 * grid.1 {
        return Err(Error::shape(format!(
            "{shape:?} is not a token tensor on a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let t = ctx.graph.permute(x, &[0, 2, 1])?;
    ctx.graph.reshape(t, &[shape[0], shape[2], grid.0, grid.1])
}

/// `[B, C, h, w]` map to row-major `[B, h*w, C]` tokens.
pub fn map_to_tokens(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected [B,C,H,W], got {shape:?}")));
    }
    let t = ctx.graph.reshape(x, &[shape[0], shape[1], shape[2] * shape[3]])?;
    ctx.graph.permute(t, &[0, 2, 1])
}
