use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBn, Ctx, Init};
use crate::tensor::{ConvGeometry, Var};

/// Standard deviation of the classifier weights; small so the initial
/// prediction is close to uniform.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

/// Projects `F_1, O_2, O_3, O_4` to a shared width, fuses them at `H/4` and
/// classifies each pixel at full resolution.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub projections: Vec<ConvBn>,
    pub fuse: ConvBn,
    pub classifier: Conv2d,
    pub head_channels: usize,
    pub num_classes: usize,
}

impl SegmentationHead {
    pub fn new(b: &mut Builder, channels: [usize; 4], head_channels: usize, num_classes: usize) -> Result<Self> {
        let projections = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvBn::pointwise(&mut b.pp(format!("proj{}", i + 1)), c, head_channels))
            .collect::<Result<_>>()?;
        Ok(Self {
            projections,
            fuse: ConvBn::pointwise(&mut b.pp("fuse"), 4 * head_channels, head_channels)?,
            classifier: Conv2d::with_init(
                &mut b.pp("classifier"),
                head_channels,
                num_classes,
                1,
                ConvGeometry { stride: 1, padding: 0, groups: 1 },
                Init::Normal { std: CLASSIFIER_INIT_STD },
            )?,
            head_channels,
            num_classes,
        })
    }

    /// `inputs` are `F_1, O_2, O_3, O_4`; returns logits `[B, K, height, width]`.
    pub fn forward(&self, ctx: &mut Ctx, inputs: [Var; 4], height: usize, width: usize) -> Result<Var> {
        let target = ctx.graph.shape(inputs[0])[2..].to_vec();
        if target.len() != 2 {
            return Err(Error::shape(format!("head expects [B,C,H,W] maps, got {target:?}")));
        }
        let mut parts = Vec::with_capacity(4);
        for (proj, &x) in self.projections.iter().zip(&inputs) {
            let y = proj.forward_relu(ctx, x)?;
            let y = if ctx.graph.shape(y)[2..] == target[..] {
                y
            } else {
                ctx.graph.resize_bilinear(y, target[0], target[1])?
            };
            parts.push(y);
        }
        let cat = ctx.graph.concat(&parts, 1)?;
        let fused = self.fuse.forward_relu(ctx, cat)?;
        let logits = self.classifier.forward(ctx, fused)?;
        ctx.graph.resize_bilinear(logits, height, width)
    }
}
