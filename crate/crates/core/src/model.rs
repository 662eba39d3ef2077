//! Encoder and decoder assembled into one segmentation model.

use crate::decoder::{Decoder, DecoderConfig, DecoderTrace};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::Result;
use crate::nn::{Builder, Ctx, ParamStore};
use crate::rng::SeedSource;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderConfig::full_scale(),
            decoder: DecoderConfig::full_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder.channels)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Full forward pass of one batch.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub pyramid: FeaturePyramid,
    pub decoder: DecoderTrace,
}

impl Model {
    /// Builds the model with parameters under `encoder.` and `decoder.`.
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, seeds: SeedSource) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seeds);
        Ok(Self {
            encoder: Encoder::new(&mut b.pp("encoder"), &cfg.encoder)?,
            decoder: Decoder::new(&mut b.pp("decoder"), &cfg.decoder, cfg.encoder.channels)?,
            cfg: cfg.clone(),
        })
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::build(cfg, &mut store, SeedSource::new(seed))?;
        Ok((model, store))
    }

    pub fn forward_trace(&self, ctx: &mut Ctx, image: Var) -> Result<ModelTrace> {
        let pyramid = self.encoder.forward(ctx, image)?;
        let decoder = self.decoder.forward_trace(ctx, &pyramid)?;
        Ok(ModelTrace { pyramid, decoder })
    }

    /// `image` is `[B, 3, H, W]`; returns logits `[B, K, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        Ok(self.forward_trace(ctx, image)?.decoder.logits)
    }

    /// Mean pixel cross-entropy of `images` against `labels` (row-major `[B, H, W]`).
    pub fn loss(&self, ctx: &mut Ctx, images: &Tensor, labels: &[usize]) -> Result<(Var, Var)> {
        let x = ctx.graph.constant(images.clone());
        let logits = self.forward(ctx, x)?;
        let loss = ctx.graph.cross_entropy(logits, labels)?;
        Ok((loss, logits))
    }
}
