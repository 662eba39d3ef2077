//! The decoder: pyramid resizing, attention aggregation, semantic
//! re-weighting and the segmentation head.

mod ase;
mod config;
mod head;
mod scm;

pub use ase::{resize_pyramid, Ase, ResizedFeatures, ScaStage, SemanticState, StageOutput};
pub use config::{AttentionVariant, DecoderConfig, ResizeMode, ScmVariant};
pub use head::{SegmentationHead, CLASSIFIER_INIT_STD};
pub use scm::{combine, ScmUnit};

use crate::encoder::FeaturePyramid;
use crate::error::Result;
use crate::nn::{Builder, Ctx};
use crate::tensor::Var;

/// `O_2, O_3, O_4`, shaped like `F_2, F_3, F_4`.
#[derive(Clone, Copy, Debug)]
pub struct EnhancedFeatures {
    pub maps: [Var; 3],
}

/// Every intermediate of one decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub resized: ResizedFeatures,
    pub state: SemanticState,
    pub enhanced: EnhancedFeatures,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub ase: Ase,
    pub scm: Vec<ScmUnit>,
    pub head: SegmentationHead,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &DecoderConfig, channels: [usize; 4]) -> Result<Self> {
        cfg.validate(&channels)?;
        Ok(Self {
            ase: Ase::new(&mut b.pp("ase"), cfg, channels)?,
            scm: (2..=4)
                .map(|j| ScmUnit::new(&mut b.pp(format!("scm.level{j}")), channels[j - 1]))
                .collect::<Result<_>>()?,
            head: SegmentationHead::new(&mut b.pp("head"), channels, cfg.head_channels, cfg.num_classes)?,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, pyramid: &FeaturePyramid) -> Result<Var> {
        Ok(self.forward_trace(ctx, pyramid)?.logits)
    }

    pub fn forward_trace(&self, ctx: &mut Ctx, pyramid: &FeaturePyramid) -> Result<DecoderTrace> {
        let resized = resize_pyramid(ctx, pyramid, self.cfg.resize)?;
        let state = self.ase.forward(ctx, &resized)?;
        let mut maps = Vec::with_capacity(3);
        for (j, unit) in self.scm.iter().enumerate() {
            maps.push(unit.forward(ctx, pyramid.features[j + 1], state.semantics[j], resized.grid, self.cfg.scm)?);
        }
        let enhanced = EnhancedFeatures { maps: [maps[0], maps[1], maps[2]] };
        let logits = self.head.forward(
            ctx,
            [pyramid.features[0], maps[0], maps[1], maps[2]],
            pyramid.height,
            pyramid.width,
        )?;
        Ok(DecoderTrace { resized, state, enhanced, logits })
    }
}
