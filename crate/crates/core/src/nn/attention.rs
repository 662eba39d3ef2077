use super::layers::Linear;
use super::params::{Builder, Ctx};
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Channels of the tokens that produce queries.
    pub query_dim: usize,
    /// Channels of the tokens that produce keys and values.
    pub kv_dim: usize,
    /// Width of Q, K and V; split evenly across heads.
    pub embed_dim: usize,
    pub heads: usize,
    pub qkv_bias: bool,
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V` with per-head
/// projections. The output is projected back to `query_dim` channels so it can
/// be added to the query tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, cfg: AttentionConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0 {
            return Err(Error::config(format!(
                "attention width {} is not divisible by {} heads",
                cfg.embed_dim, cfg.heads
            )));
        }
        Ok(Self {
            q_proj: Linear::new(&mut b.pp("q"), cfg.query_dim, cfg.embed_dim, cfg.qkv_bias)?,
            k_proj: Linear::new(&mut b.pp("k"), cfg.kv_dim, cfg.embed_dim, cfg.qkv_bias)?,
            v_proj: Linear::new(&mut b.pp("v"), cfg.kv_dim, cfg.embed_dim, cfg.qkv_bias)?,
            out_proj: Linear::new(&mut b.pp("proj"), cfg.embed_dim, cfg.query_dim, true)?,
            cfg,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.cfg.embed_dim / self.cfg.heads
    }

    /// `kv` is `[B, N_kv, kv_dim]`, `q` is `[B, N_q, query_dim]`; returns `[B, N_q, query_dim]`.
    pub fn forward(&self, ctx: &mut Ctx, kv: Var, q: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, kv, q)?.0)
    }

    /// Also returns the attention weights `[B, heads, N_q, N_kv]`.
    pub fn forward_with_weights(&self, ctx: &mut Ctx, kv: Var, q: Var) -> Result<(Var, Var)> {
        let (kv_shape, q_shape) = (ctx.graph.shape(kv).to_vec(), ctx.graph.shape(q).to_vec());
        if kv_shape.len() != 3 || q_shape.len() != 3 || kv_shape[0] != q_shape[0] {
            return Err(Error::shape(format!(
                "attention needs [B,N,C] tokens with equal batch, got kv {kv_shape:?} and q {q_shape:?}"
            )));
        }
        let (batch, n_q, n_kv) = (q_shape[0], q_shape[1], kv_shape[1]);
        let (h, dk) = (self.cfg.heads, self.head_dim());

        let qp = self.q_proj.forward(ctx, q)?;
        let kp = self.k_proj.forward(ctx, kv)?;
        let vp = self.v_proj.forward(ctx, kv)?;

        let g = &mut ctx.graph;
        let qh = g.reshape(qp, &[batch, n_q, h, dk])?;
        let qh = g.permute(qh, &[0, 2, 1, 3])?;
        let kt = g.reshape(kp, &[batch, n_kv, h, dk])?;
        let kt = g.permute(kt, &[0, 2, 3, 1])?;
        let vh = g.reshape(vp, &[batch, n_kv, h, dk])?;
        let vh = g.permute(vh, &[0, 2, 1, 3])?;

        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = g.softmax(scores, 3)?;
        let mixed = g.matmul(weights, vh)?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[batch, n_q, self.cfg.embed_dim])?;
        let out = self.out_proj.forward(ctx, mixed)?;
        Ok((out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Mode, ParamStore};
    use crate::rng::SeedSource;
    use crate::tensor::Tensor;

    fn build(cfg: AttentionConfig, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, SeedSource::new(seed)), cfg).unwrap();
        (store, mha)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { query_dim: 6, kv_dim: 4, embed_dim: 6, heads: 4, qkv_bias: true };
        let err = MultiHeadAttention::new(&mut Builder::new(&mut store, SeedSource::new(0)), cfg);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn single_key_returns_projected_value() {
        let cfg = AttentionConfig { query_dim: 4, kv_dim: 3, embed_dim: 4, heads: 2, qkv_bias: true };
        let (store, mha) = build(cfg, 1);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let kv = ctx.graph.constant(Tensor::new(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let q = ctx.graph.constant(Tensor::from_fn(&[1, 5, 4], |i| (i as f64 * 0.37).sin()));
        let out = mha.forward(&mut ctx, kv, q).unwrap();
        let v = mha.v_proj.forward(&mut ctx, kv).unwrap();
        let expected = mha.out_proj.forward(&mut ctx, v).unwrap();
        let out = ctx.graph.value(out);
        let row = ctx.graph.value(expected).data();
        for t in 0..5 {
            for c in 0..4 {
                assert!((out.at(&[0, t, c]) - row[c]).abs() < 1e-14);
            }
        }
    }
}
