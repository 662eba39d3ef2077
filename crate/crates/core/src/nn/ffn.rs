use super::layers::{map_to_tokens, tokens_to_map, Conv2d};
use super::params::{Builder, Ctx};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Var};

pub const FFN_EXPANSION: usize = 4;

/// Feed-forward block on a token grid: 1x1 conv (C→4C), 3x3 depthwise conv,
/// GELU, 1x1 conv (4C→C).
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Conv2d,
    pub dwconv: Conv2d,
    pub fc2: Conv2d,
    pub channels: usize,
}

impl MixFfn {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let hidden = FFN_EXPANSION * channels;
        Ok(Self {
            fc1: Conv2d::pointwise(&mut b.pp("fc1"), channels, hidden)?,
            dwconv: Conv2d::new(
                &mut b.pp("dwconv"),
                hidden,
                hidden,
                3,
                ConvGeometry { stride: 1, padding: 1, groups: hidden },
            )?,
            fc2: Conv2d::pointwise(&mut b.pp("fc2"), hidden, channels)?,
            channels,
        })
    }

    pub fn hidden(&self) -> usize {
        FFN_EXPANSION * self.channels
    }

    /// `x` is `[B, h*w, C]` tokens laid out row-major on an `h x w` grid.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, grid: (usize, usize)) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != grid.0 * grid.1 || shape[2] != self.channels {
            return Err(Error::shape(format!(
                "mix-ffn over {} channels on a {}x{} grid got tokens {shape:?}",
                self.channels, grid.0, grid.1
            )));
        }
        let map = tokens_to_map(ctx, x, grid)?;
        let y = self.fc1.forward(ctx, map)?;
        let y = self.dwconv.forward(ctx, y)?;
        let y = ctx.graph.gelu(y);
        let y = self.fc2.forward(ctx, y)?;
        map_to_tokens(ctx, y)
    }
}
