use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Wiring of the attention blocks that aggregate the resized pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// Level `j`'s output is the key/value source for level `j+1` within a block.
    Successive,
    /// Keys/values stay `R_j` in every block; only queries chain across blocks.
    PlainCross,
    /// Self-attention over the channel concatenation of `R_1..R_4`.
    SelfOnConcat,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [
        AttentionVariant::Successive,
        AttentionVariant::PlainCross,
        AttentionVariant::SelfOnConcat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Successive => "successive",
            AttentionVariant::PlainCross => "plain-cross",
            AttentionVariant::SelfOnConcat => "self-on-concat",
        }
    }
}

/// How the upsampled semantics `S'` re-weight the projected features `F'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScmVariant {
    /// `F'⊙S' + F'`
    Eq6,
    /// `F'⊙S'`
    Eq7,
    /// `F'⊙S' + S'`
    Eq8,
}

impl ScmVariant {
    pub const ALL: [ScmVariant; 3] = [ScmVariant::Eq6, ScmVariant::Eq7, ScmVariant::Eq8];

    pub fn as_str(self) -> &'static str {
        match self {
            ScmVariant::Eq6 => "eq6",
            ScmVariant::Eq7 => "eq7",
            ScmVariant::Eq8 => "eq8",
        }
    }
}

/// Downsampling used to bring every pyramid level to `H/64 x W/64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResizeMode {
    Bilinear,
    AvgPool,
}

impl ResizeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResizeMode::Bilinear => "bilinear",
            ResizeMode::AvgPool => "avgpool",
        }
    }
}

macro_rules! str_enum {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                <$ty>::variants()
                    .into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| {
                        let names: Vec<_> = <$ty>::variants().iter().map(|v| v.as_str()).collect();
                        Error::config(format!("unknown {} '{s}', expected one of {}", $what, names.join(", ")))
                    })
            }
        }
    };
}

impl AttentionVariant {
    fn variants() -> [Self; 3] {
        Self::ALL
    }
}

impl ScmVariant {
    fn variants() -> [Self; 3] {
        Self::ALL
    }
}

impl ResizeMode {
    fn variants() -> [Self; 2] {
        [ResizeMode::Bilinear, ResizeMode::AvgPool]
    }
}

str_enum!(AttentionVariant, "attention variant");
str_enum!(ScmVariant, "scm variant");
str_enum!(ResizeMode, "resize mode");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    /// Attention heads for the stages producing `S_2`, `S_3`, `S_4`.
    /// The self-on-concat variant uses the first entry.
    pub heads: [usize; 3],
    pub attention: AttentionVariant,
    pub scm: ScmVariant,
    pub head_channels: usize,
    pub num_classes: usize,
    /// Width of Q/K/V inside attention; `None` uses the query channel count.
    pub ase_embed_dim: Option<usize>,
    pub resize: ResizeMode,
    pub qkv_bias: bool,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            num_blocks: 4,
            heads: [1, 1, 1],
            attention: AttentionVariant::Successive,
            scm: ScmVariant::Eq6,
            head_channels: 32,
            num_classes: 4,
            ase_embed_dim: None,
            resize: ResizeMode::Bilinear,
            qkv_bias: true,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            head_channels: 128,
            num_classes: 150,
            ..Self::desk()
        }
    }

    /// Checks the decoder against the pyramid channel widths it will consume.
    pub fn validate(&self, channels: &[usize; 4]) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::config("decoder.num_blocks must be at least 1"));
        }
        if self.head_channels == 0 {
            return Err(Error::config("decoder.head_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "decoder.num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.ase_embed_dim == Some(0) {
            return Err(Error::config("decoder.ase_embed_dim must be positive"));
        }
        for (level, &h) in self.heads.iter().enumerate() {
            let embed = match self.attention {
                AttentionVariant::SelfOnConcat if level > 0 => continue,
                AttentionVariant::SelfOnConcat => self.ase_embed_dim.unwrap_or(channels.iter().sum()),
                _ => self.ase_embed_dim.unwrap_or(channels[level + 1]),
            };
            if h == 0 || embed % h != 0 {
                return Err(Error::config(format!(
                    "decoder.heads: attention width {embed} is not divisible by {h} heads"
                )));
            }
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}
