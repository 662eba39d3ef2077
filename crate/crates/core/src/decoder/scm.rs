//! Re-weighting of pyramid features by the aggregated semantics.

use super::config::ScmVariant;
use crate::error::{Error, Result};
use crate::nn::{tokens_to_map, Builder, ConvBn, Ctx};
use crate::tensor::Var;

/// One combine unit for pyramid level `j`: `F' = convbn(F_j)`,
/// `S' = convbn(upsample(S_j))`, then the variant's product/residual.
#[derive(Clone, Debug)]
pub struct ScmUnit {
    pub feature: ConvBn,
    pub semantic: ConvBn,
    pub channels: usize,
}

impl ScmUnit {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            feature: ConvBn::pointwise(&mut b.pp("feature"), channels, channels)?,
            semantic: ConvBn::pointwise(&mut b.pp("semantic"), channels, channels)?,
            channels,
        })
    }

    /// `f` is `F_j` as `[B, C, h, w]`; `s` is `S_j` as `[B, N, C]` tokens on `grid`.
    pub fn forward(&self, ctx: &mut Ctx, f: Var, s: Var, grid: (usize, usize), variant: ScmVariant) -> Result<Var> {
        let f_shape = ctx.graph.shape(f).to_vec();
        let s_map = tokens_to_map(ctx, s, grid)?;
        let up = if (f_shape[2], f_shape[3]) == grid {
            s_map
        } else {
            ctx.graph.resize_bilinear(s_map, f_shape[2], f_shape[3])?
        };
        let fp = self.feature.forward(ctx, f)?;
        let sp = self.semantic.forward(ctx, up)?;
        if ctx.graph.shape(fp) != ctx.graph.shape(sp) {
            return Err(Error::shape(format!(
                "upsampled semantics {:?} do not match features {:?}",
                ctx.graph.shape(sp),
                ctx.graph.shape(fp)
            )));
        }
        combine(ctx, fp, sp, variant)
    }
}

/// `eq6: F'⊙S' + F'`, `eq7: F'⊙S'`, `eq8: F'⊙S' + S'`.
pub fn combine(ctx: &mut Ctx, fp: Var, sp: Var, variant: ScmVariant) -> Result<Var> {
    let g = &mut ctx.graph;
    let prod = g.mul(fp, sp)?;
    match variant {
        ScmVariant::Eq6 => g.add(prod, fp),
        ScmVariant::Eq7 => Ok(prod),
        ScmVariant::Eq8 => g.add(prod, sp),
    }
}
