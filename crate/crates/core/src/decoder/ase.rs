//! Aggregation of the resized pyramid by stacked attention blocks.

use super::config::{AttentionVariant, DecoderConfig, ResizeMode};
use crate::encoder::{FeaturePyramid, INPUT_DIVISOR};
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, AttentionConfig, Builder, Ctx, LayerNorm, MixFfn, MultiHeadAttention};
use crate::tensor::Var;

/// `R_1..R_4`: every pyramid level resized to `H/64 x W/64`.
#[derive(Clone, Copy, Debug)]
pub struct ResizedFeatures {
    /// `[B, C_i, H/64, W/64]`
    pub maps: [Var; 4],
    /// `[B, HW/4096, C_i]`, row-major over the grid.
    pub tokens: [Var; 4],
    pub grid: (usize, usize),
}

pub fn resize_pyramid(ctx: &mut Ctx, pyramid: &FeaturePyramid, mode: ResizeMode) -> Result<ResizedFeatures> {
    let (h, w) = (pyramid.height, pyramid.width);
    if h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
        return Err(Error::config(format!(
            "input size {h}x{w} must be a multiple of {INPUT_DIVISOR} to resize the pyramid"
        )));
    }
    let grid = (h / INPUT_DIVISOR, w / INPUT_DIVISOR);
    let mut maps = Vec::with_capacity(4);
    let mut tokens = Vec::with_capacity(4);
    for &f in &pyramid.features {
        let shape = ctx.graph.shape(f).to_vec();
        let r = if (shape[2], shape[3]) == grid {
            f
        } else {
            match mode {
                ResizeMode::Bilinear => ctx.graph.resize_bilinear(f, grid.0, grid.1)?,
                ResizeMode::AvgPool => {
                    let k = shape[2] / grid.0;
                    if k * grid.0 != shape[2] || k * grid.1 != shape[3] {
                        return Err(Error::shape(format!(
                            "cannot average-pool {shape:?} onto a {}x{} grid",
                            grid.0, grid.1
                        )));
                    }
                    ctx.graph.avg_pool(f, k)?
                }
            }
        };
        maps.push(r);
        tokens.push(map_to_tokens(ctx, r)?);
    }
    Ok(ResizedFeatures {
        maps: [maps[0], maps[1], maps[2], maps[3]],
        tokens: [tokens[0], tokens[1], tokens[2], tokens[3]],
        grid,
    })
}

/// Attention output `A` and block output `S` of one stage, both tokens.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub attended: Var,
    pub output: Var,
}

/// `A = MHA(LN(kv), LN(q)) + q`, `S = FFN(LN(A)) + A`.
#[derive(Clone, Debug)]
pub struct ScaStage {
    /// `None` for self-attention, where keys, values and queries share one norm.
    pub norm_kv: Option<LayerNorm>,
    pub norm_q: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: MixFfn,
}

impl ScaStage {
    pub fn cross(b: &mut Builder, kv_dim: usize, query_dim: usize, embed_dim: usize, heads: usize, qkv_bias: bool) -> Result<Self> {
        Ok(Self {
            norm_kv: Some(LayerNorm::new(&mut b.pp("norm_kv"), kv_dim)?),
            ..Self::build(b, kv_dim, query_dim, embed_dim, heads, qkv_bias)?
        })
    }

    pub fn self_attention(b: &mut Builder, dim: usize, embed_dim: usize, heads: usize, qkv_bias: bool) -> Result<Self> {
        Self::build(b, dim, dim, embed_dim, heads, qkv_bias)
    }

    fn build(b: &mut Builder, kv_dim: usize, query_dim: usize, embed_dim: usize, heads: usize, qkv_bias: bool) -> Result<Self> {
        let cfg = AttentionConfig { query_dim, kv_dim, embed_dim, heads, qkv_bias };
        Ok(Self {
            norm_kv: None,
            norm_q: LayerNorm::new(&mut b.pp("norm_q"), query_dim)?,
            attn: MultiHeadAttention::new(&mut b.pp("attn"), cfg)?,
            norm_ffn: LayerNorm::new(&mut b.pp("norm_ffn"), query_dim)?,
            ffn: MixFfn::new(&mut b.pp("ffn"), query_dim)?,
        })
    }

    /// `kv` and `q` are `[B, h*w, C]` tokens on the same `grid`.
    pub fn forward(&self, ctx: &mut Ctx, kv: Var, q: Var, grid: (usize, usize)) -> Result<StageOutput> {
        let (nkv, nq) = (ctx.graph.shape(kv)[1], ctx.graph.shape(q)[1]);
        if nkv != nq {
            return Err(Error::shape(format!(
                "stage needs equal token counts, got {nkv} key/value and {nq} query tokens"
            )));
        }
        let qn = self.norm_q.forward(ctx, q)?;
        let kvn = match &self.norm_kv {
            Some(norm) => norm.forward(ctx, kv)?,
            None if kv == q => qn,
            None => return Err(Error::usage("self-attention stage called with distinct key/value and query")),
        };
        let mixed = self.attn.forward(ctx, kvn, qn)?;
        let attended = ctx.graph.add(mixed, q)?;
        let an = self.norm_ffn.forward(ctx, attended)?;
        let f = self.ffn.forward(ctx, an, grid)?;
        let output = ctx.graph.add(f, attended)?;
        Ok(StageOutput { attended, output })
    }
}

/// Every stage output, indexed `[block][stage]`, plus the final semantics.
#[derive(Clone, Debug)]
pub struct SemanticState {
    pub stages: Vec<Vec<StageOutput>>,
    /// `S_2, S_3, S_4` tokens, `[B, HW/4096, C_j]`.
    pub semantics: [Var; 3],
}

#[derive(Clone, Debug)]
enum Blocks {
    /// `[block][j]`; stage `j` produces level `j+2`.
    Cross(Vec<[ScaStage; 3]>),
    SelfOnConcat(Vec<ScaStage>),
}

#[derive(Clone, Debug)]
pub struct Ase {
    pub variant: AttentionVariant,
    pub channels: [usize; 4],
    blocks: Blocks,
}

impl Ase {
    pub fn new(b: &mut Builder, cfg: &DecoderConfig, channels: [usize; 4]) -> Result<Self> {
        cfg.validate(&channels)?;
        let blocks = match cfg.attention {
            AttentionVariant::Successive | AttentionVariant::PlainCross => Blocks::Cross(
                (1..=cfg.num_blocks)
                    .map(|l| {
                        let mut bb = b.pp(format!("block{l}"));
                        let stage = |j: usize, bb: &mut Builder| {
                            let (kv, q) = (channels[j], channels[j + 1]);
                            ScaStage::cross(
                                &mut bb.pp(format!("s{}", j + 2)),
                                kv,
                                q,
                                cfg.ase_embed_dim.unwrap_or(q),
                                cfg.heads[j],
                                cfg.qkv_bias,
                            )
                        };
                        Ok([stage(0, &mut bb)?, stage(1, &mut bb)?, stage(2, &mut bb)?])
                    })
                    .collect::<Result<_>>()?,
            ),
            AttentionVariant::SelfOnConcat => {
                let dim: usize = channels.iter().sum();
                Blocks::SelfOnConcat(
                    (1..=cfg.num_blocks)
                        .map(|l| {
                            ScaStage::self_attention(
                                &mut b.pp(format!("block{l}.self")),
                                dim,
                                cfg.ase_embed_dim.unwrap_or(dim),
                                cfg.heads[0],
                                cfg.qkv_bias,
                            )
                        })
                        .collect::<Result<_>>()?,
                )
            }
        };
        Ok(Self { variant: cfg.attention, channels, blocks })
    }

    pub fn num_blocks(&self) -> usize {
        match &self.blocks {
            Blocks::Cross(v) => v.len(),
            Blocks::SelfOnConcat(v) => v.len(),
        }
    }

    /// Stage `j` (0-based, producing `S_{j+2}`) of block `l` (0-based), for cross variants.
    pub fn stage(&self, l: usize, j: usize) -> Option<&ScaStage> {
        match &self.blocks {
            Blocks::Cross(v) => v.get(l).and_then(|s| s.get(j)),
            Blocks::SelfOnConcat(v) if j == 0 => v.get(l),
            Blocks::SelfOnConcat(_) => None,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, r: &ResizedFeatures) -> Result<SemanticState> {
        match &self.blocks {
            Blocks::Cross(blocks) => self.forward_cross(ctx, r, blocks),
            Blocks::SelfOnConcat(blocks) => self.forward_concat(ctx, r, blocks),
        }
    }

    fn forward_cross(&self, ctx: &mut Ctx, r: &ResizedFeatures, blocks: &[[ScaStage; 3]]) -> Result<SemanticState> {
        let successive = self.variant == AttentionVariant::Successive;
        let mut queries = [r.tokens[1], r.tokens[2], r.tokens[3]];
        let mut stages = Vec::with_capacity(blocks.len());
        for block in blocks {
            let mut outs: Vec<StageOutput> = Vec::with_capacity(3);
            for (j, stage) in block.iter().enumerate() {
                let kv = match outs.last() {
                    Some(prev) if successive => prev.output,
                    _ => r.tokens[j],
                };
                outs.push(stage.forward(ctx, kv, queries[j], r.grid)?);
            }
            for (q, o) in queries.iter_mut().zip(&outs) {
                *q = o.output;
            }
            stages.push(outs);
        }
        Ok(SemanticState { stages, semantics: queries })
    }

    fn forward_concat(&self, ctx: &mut Ctx, r: &ResizedFeatures, blocks: &[ScaStage]) -> Result<SemanticState> {
        let mut x = ctx.graph.concat(&r.tokens, 2)?;
        let mut stages = Vec::with_capacity(blocks.len());
        for stage in blocks {
            let out = stage.forward(ctx, x, x, r.grid)?;
            x = out.output;
            stages.push(vec![out]);
        }
        let c = self.channels;
        let mut start = c[0];
        let mut semantics = Vec::with_capacity(3);
        for &width in &c[1..] {
            semantics.push(ctx.graph.slice(x, 2, start, width)?);
            start += width;
        }
        Ok(SemanticState { stages, semantics: [semantics[0], semantics[1], semantics[2]] })
    }
}
