//! Analytic parameter and multiply-accumulate counts.
//!
//! Counts are derived from the configuration alone, never from a built model,
//! so they can be checked against one. MACs are per image. Normalization,
//! activations, softmax and interpolation are listed with zero MACs.
//! Elementwise products in the semantic combine count one MAC per element.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::decoder::{AttentionVariant, ScmVariant};
use crate::encoder::{check_input_size, downsample_geometry, feature_size, IMAGE_CHANNELS, INPUT_DIVISOR};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::FFN_EXPANSION;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    /// Module path; parameters of this module are named `<path>.<tensor>`.
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// `(params, macs)` over entries under `prefix` (e.g. `"decoder"`).
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| under(&e.path, prefix))
            .fold((0, 0), |(p, m), e| (p + e.params, m + e.macs))
    }

    pub fn to_text(&self) -> String {
        let width = self.entries.iter().map(|e| e.path.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "input {}x{}; MACs per image (reported as FLOPs)", self.height, self.width);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", "module", "params", "macs");
        for e in &self.entries {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", e.path, e.params, e.macs);
        }
        for prefix in ["encoder", "decoder"] {
            let (p, m) = self.subtotal(prefix);
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", format!("[{prefix}]"), p, m);
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", "[total]", self.params(), self.macs());
        s
    }

    /// `module,params,macs` rows for every breakdown entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,params,macs\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.path, e.params, e.macs);
        }
        s
    }
}

fn under(path: &str, prefix: &str) -> bool {
    path == prefix || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'.'))
}

struct Counter {
    entries: Vec<CostEntry>,
}

impl Counter {
    fn push(&mut self, path: String, params: usize, macs: usize) {
        self.entries.push(CostEntry { path, params: params as u64, macs: macs as u64 });
    }

    fn zero(&mut self, path: String) {
        self.push(path, 0, 0);
    }

    fn conv(&mut self, path: String, cin: usize, cout: usize, k: usize, groups: usize, out: (usize, usize)) {
        let per_pixel = cin / groups * cout * k * k;
        self.push(path, per_pixel + cout, per_pixel * out.0 * out.1);
    }

    fn norm(&mut self, path: String, c: usize) {
        self.push(path, 2 * c, 0);
    }

    fn conv_bn(&mut self, path: &str, cin: usize, cout: usize, k: usize, out: (usize, usize)) {
        self.conv(format!("{path}.conv"), cin, cout, k, 1, out);
        self.norm(format!("{path}.bn"), cout);
    }

    fn linear(&mut self, path: String, tokens: usize, din: usize, dout: usize, bias: bool) {
        let b = if bias { dout } else { 0 };
        self.push(path, din * dout + b, tokens * din * dout);
    }

    #[allow(clippy::too_many_arguments)]
    fn stage(&mut self, path: &str, kv: usize, q: usize, embed: usize, tokens: usize, grid: (usize, usize), cross: bool, bias: bool) {
        if cross {
            self.norm(format!("{path}.norm_kv"), kv);
        }
        self.norm(format!("{path}.norm_q"), q);
        self.linear(format!("{path}.attn.q"), tokens, q, embed, bias);
        self.linear(format!("{path}.attn.k"), tokens, kv, embed, bias);
        self.linear(format!("{path}.attn.v"), tokens, kv, embed, bias);
        self.push(format!("{path}.attn.scores"), 0, tokens * tokens * embed);
        self.zero(format!("{path}.attn.softmax"));
        self.push(format!("{path}.attn.values"), 0, tokens * tokens * embed);
        self.linear(format!("{path}.attn.proj"), tokens, embed, q, true);
        self.norm(format!("{path}.norm_ffn"), q);
        let hidden = FFN_EXPANSION * q;
        self.conv(format!("{path}.ffn.fc1"), q, hidden, 1, 1, grid);
        self.conv(format!("{path}.ffn.dwconv"), hidden, hidden, 3, hidden, grid);
        self.zero(format!("{path}.ffn.gelu"));
        self.conv(format!("{path}.ffn.fc2"), hidden, q, 1, 1, grid);
    }
}

/// Full breakdown at input size `height x width`.
pub fn cost_report(cfg: &ModelConfig, height: usize, width: usize) -> Result<CostReport> {
    cfg.validate()?;
    check_input_size(height, width)?;
    let enc = &cfg.encoder;
    let dec = &cfg.decoder;
    let c = enc.channels;
    let size = |level: usize| feature_size(height, width, level);
    let mut k = Counter { entries: Vec::new() };

    let mut cin = IMAGE_CHANNELS;
    for (i, &cout) in c.iter().enumerate() {
        let level = i + 1;
        let (kernel, _) = downsample_geometry(level);
        let out = size(level);
        let path = format!("encoder.stage{level}");
        k.conv_bn(&format!("{path}.down"), cin, cout, kernel, out);
        k.zero(format!("{path}.down.relu"));
        for n in 1..=enc.blocks_per_stage {
            k.conv_bn(&format!("{path}.block{n}"), cout, cout, 3, out);
            k.zero(format!("{path}.block{n}.relu"));
        }
        cin = cout;
    }

    let grid = (height / INPUT_DIVISOR, width / INPUT_DIVISOR);
    let tokens = grid.0 * grid.1;
    for level in 1..=4 {
        k.zero(format!("decoder.ase.resize.level{level}"));
    }
    for l in 1..=dec.num_blocks {
        match dec.attention {
            AttentionVariant::Successive | AttentionVariant::PlainCross => {
                for j in 0..3 {
                    let (kv, q) = (c[j], c[j + 1]);
                    let embed = dec.ase_embed_dim.unwrap_or(q);
                    k.stage(&format!("decoder.ase.block{l}.s{}", j + 2), kv, q, embed, tokens, grid, true, dec.qkv_bias);
                }
            }
            AttentionVariant::SelfOnConcat => {
                let dim: usize = c.iter().sum();
                let embed = dec.ase_embed_dim.unwrap_or(dim);
                k.stage(&format!("decoder.ase.block{l}.self"), dim, dim, embed, tokens, grid, false, dec.qkv_bias);
            }
        }
    }

    for j in 2..=4 {
        let ch = c[j - 1];
        let out = size(j);
        let path = format!("decoder.scm.level{j}");
        k.zero(format!("{path}.upsample"));
        k.conv_bn(&format!("{path}.feature"), ch, ch, 1, out);
        k.conv_bn(&format!("{path}.semantic"), ch, ch, 1, out);
        k.push(format!("{path}.combine"), 0, ch * out.0 * out.1);
    }

    let ch = dec.head_channels;
    let quarter = size(1);
    for (i, &cin) in c.iter().enumerate() {
        let path = format!("decoder.head.proj{}", i + 1);
        k.conv_bn(&path, cin, ch, 1, size(i + 1));
        k.zero(format!("{path}.relu"));
        if i > 0 {
            k.zero(format!("{path}.upsample"));
        }
    }
    k.conv_bn("decoder.head.fuse", 4 * ch, ch, 1, quarter);
    k.zero("decoder.head.fuse.relu".into());
    k.conv("decoder.head.classifier".into(), ch, dec.num_classes, 1, 1, quarter);
    k.zero("decoder.head.upsample".into());

    Ok(CostReport { height, width, entries: k.entries })
}

/// Trainable parameter count; batch-norm running statistics are excluded.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(cost_report(cfg, cfg.encoder.height, cfg.encoder.width)?.params())
}

pub fn count_macs(cfg: &ModelConfig, height: usize, width: usize) -> Result<u64> {
    Ok(cost_report(cfg, height, width)?.macs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Attention,
    Scm,
    /// Attention and SCM variants together.
    Variant,
    Blocks,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(AblationAxis::Attention),
            "scm" => Ok(AblationAxis::Scm),
            "variant" => Ok(AblationAxis::Variant),
            "blocks" => Ok(AblationAxis::Blocks),
            other => Err(Error::config(format!(
                "unknown ablation axis '{other}', expected attention, scm, variant or blocks"
            ))),
        }
    }
}

/// Block counts swept by the `blocks` axis.
pub const ABLATION_BLOCKS: std::ops::RangeInclusive<usize> = 1..=5;

/// Labelled configurations along `axis`, sorted by label.
pub fn ablation_configs(base: &ModelConfig, axis: AblationAxis) -> Vec<(String, ModelConfig)> {
    let with_attention = |v: AttentionVariant| {
        let mut c = base.clone();
        c.decoder.attention = v;
        (format!("attention={v}"), c)
    };
    let with_scm = |v: ScmVariant| {
        let mut c = base.clone();
        c.decoder.scm = v;
        (format!("scm={v}"), c)
    };
    let mut rows: Vec<_> = match axis {
        AblationAxis::Attention => AttentionVariant::ALL.into_iter().map(with_attention).collect(),
        AblationAxis::Scm => ScmVariant::ALL.into_iter().map(with_scm).collect(),
        AblationAxis::Variant => AttentionVariant::ALL
            .into_iter()
            .map(with_attention)
            .chain(ScmVariant::ALL.into_iter().map(with_scm))
            .collect(),
        AblationAxis::Blocks => ABLATION_BLOCKS
            .map(|l| {
                let mut c = base.clone();
                c.decoder.num_blocks = l;
                (format!("blocks={l}"), c)
            })
            .collect(),
    };
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    rows
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub setting: String,
    pub params: u64,
    pub macs: u64,
    pub decoder_params: u64,
    pub decoder_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_table(base: &ModelConfig, axis: AblationAxis, height: usize, width: usize) -> Result<AblationTable> {
    let rows = ablation_configs(base, axis)
        .into_iter()
        .map(|(setting, cfg)| {
            let r = cost_report(&cfg, height, width)?;
            let (decoder_params, decoder_macs) = r.subtotal("decoder");
            Ok(AblationRow { setting, params: r.params(), macs: r.macs(), decoder_params, decoder_macs })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { axis, height, width, rows })
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.setting.len()).max().unwrap_or(7).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "input {}x{}; MACs per image (reported as FLOPs)", self.height, self.width);
        let _ = writeln!(
            s,
            "{:<w$}  {:>12}  {:>14}  {:>12}  {:>14}",
            "setting", "params", "macs", "dec params", "dec macs"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>12}  {:>14}  {:>12}  {:>14}",
                r.setting, r.params, r.macs, r.decoder_params, r.decoder_macs
            );
        }
        s
    }

    /// `setting,params,macs`, whole-model totals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.setting, r.params, r.macs);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pointwise_conv_closed_form() {
        let mut k = Counter { entries: Vec::new() };
        k.conv("c".into(), 8, 16, 1, 1, (4, 4));
        assert_eq!(k.entries[0].params, 144);
        assert_eq!(k.entries[0].macs, 2048);
    }

    #[test]
    fn subtotal_matches_whole_path_segments_only() {
        assert!(under("decoder.head", "decoder"));
        assert!(!under("decoderx.head", "decoder"));
        assert!(under("decoder", "decoder"));
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("blocks".parse::<AblationAxis>().unwrap(), AblationAxis::Blocks);
        assert!(matches!("depth".parse::<AblationAxis>(), Err(Error::Config(_))));
    }
}
