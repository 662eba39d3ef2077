//! Convolutional stand-in for a four-stage hierarchical encoder.
//!
//! Stage `i` emits `F_i` at stride `2^{i+1}`: a 4x4 stride-4 patchify conv for
//! stage 1, a 3x3 stride-2 conv for stages 2 to 4, each followed by BN, ReLU
//! and `blocks_per_stage` 3x3 stride-1 conv blocks.

use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBn, Ctx};
use crate::tensor::{ConvGeometry, Var};

/// Required divisor of the input height and width.
pub const INPUT_DIVISOR: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub height: usize,
    pub width: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
            height: 64,
            width: 64,
        }
    }

    /// Channel widths of the smallest member of the usual transformer encoder family.
    pub fn full_scale() -> Self {
        Self {
            channels: [32, 64, 160, 256],
            blocks_per_stage: 1,
            height: 512,
            width: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config(format!(
                "encoder.channels must be positive, got {:?}",
                self.channels
            )));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "encoder.channels must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        check_input_size(self.height, self.width)
    }

    /// `(h, w)` of `F_i` for `i` in `1..=4`.
    pub fn feature_size(&self, level: usize) -> (usize, usize) {
        feature_size(self.height, self.width, level)
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % INPUT_DIVISOR != 0 || width % INPUT_DIVISOR != 0 {
        return Err(Error::config(format!(
            "input size {height}x{width} must be a positive multiple of {INPUT_DIVISOR} in both dimensions"
        )));
    }
    Ok(())
}

pub fn feature_size(height: usize, width: usize, level: usize) -> (usize, usize) {
    let stride = 1 << (level + 1);
    (height / stride, width / stride)
}

/// Encoder outputs `F_1..F_4`, each `[B, C_i, H/2^{i+1}, W/2^{i+1}]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub features: [Var; 4],
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: ConvBn,
    pub blocks: Vec<ConvBn>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = IMAGE_CHANNELS;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let mut sb = b.pp(format!("stage{}", i + 1));
            let (k, geom) = downsample_geometry(i + 1);
            let down = ConvBn::new(&mut sb.pp("down"), in_ch, c, k, geom)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|n| ConvBn::new(&mut sb.pp(format!("block{}", n + 1)), c, c, 3, same_3x3()))
                .collect::<Result<Vec<_>>>()?;
            stages.push(EncoderStage { down, blocks });
            in_ch = c;
        }
        Ok(Self { cfg: cfg.clone(), stages })
    }

    /// `image` is `[B, 3, H, W]` with `H`, `W` multiples of 64.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<FeaturePyramid> {
        let shape = ctx.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS {
            return Err(Error::shape(format!("encoder expects [B,3,H,W], got {shape:?}")));
        }
        check_input_size(shape[2], shape[3])?;
        let mut x = image;
        let mut features = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward_relu(ctx, x)?;
            for block in &stage.blocks {
                x = block.forward_relu(ctx, x)?;
            }
            features.push(x);
        }
        Ok(FeaturePyramid {
            features: [features[0], features[1], features[2], features[3]],
            height: shape[2],
            width: shape[3],
        })
    }
}

/// Kernel size and geometry of the first conv in stage `level` (1-based).
pub fn downsample_geometry(level: usize) -> (usize, ConvGeometry) {
    if level == 1 {
        (4, ConvGeometry { stride: 4, padding: 0, groups: 1 })
    } else {
        (3, ConvGeometry { stride: 2, padding: 1, groups: 1 })
    }
}

pub fn same_3x3() -> ConvGeometry {
    ConvGeometry { stride: 1, padding: 1, groups: 1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::rng::SeedSource;
    use crate::tensor::Tensor;

    #[test]
    fn rejects_sizes_not_divisible_by_64() {
        let cfg = EncoderConfig { height: 96, ..EncoderConfig::desk() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("64"), "{err}");
    }

    #[test]
    fn rejects_non_increasing_channels() {
        let cfg = EncoderConfig { channels: [8, 8, 16, 32], ..EncoderConfig::desk() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    fn constant_features(blocks: usize) -> Tensor {
        let cfg = EncoderConfig { blocks_per_stage: blocks, ..EncoderConfig::desk() };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut Builder::new(&mut store, SeedSource::new(3)), &cfg).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let img = ctx.graph.constant(Tensor::full(&[1, 3, 64, 64], 0.7));
        let pyr = enc.forward(&mut ctx, img).unwrap();
        ctx.graph.value(pyr.features[0]).clone()
    }

    fn assert_constant(f: &Tensor, lo: usize, hi: usize) {
        for c in 0..f.shape()[1] {
            let first = f.at(&[0, c, lo, lo]);
            for y in lo..hi {
                for x in lo..hi {
                    assert_eq!(f.at(&[0, c, y, x]), first);
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_per_channel_constant_features() {
        // the patchify conv has no padding
        assert_constant(&constant_features(0), 0, 16);
        // a padded 3x3 block only disturbs the one-pixel border
        assert_constant(&constant_features(1), 1, 15);
    }
}
