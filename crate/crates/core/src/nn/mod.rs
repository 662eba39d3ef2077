//! Differentiable layers built on the tensor graph.

pub mod attention;
pub mod checkpoint;
pub mod ffn;
pub mod gradcheck;
pub mod layers;
pub mod params;

pub use attention::{AttentionConfig, MultiHeadAttention};
pub use ffn::{MixFfn, FFN_EXPANSION};
pub use gradcheck::{check_parameters, ParamCheckOptions, ParamCheckReport};
pub use layers::{map_to_tokens, tokens_to_map, BatchNorm2d, Conv2d, ConvBn, LayerNorm, Linear};
pub use params::{Builder, Ctx, Init, Mode, ParamEntry, ParamId, ParamKind, ParamStore};
