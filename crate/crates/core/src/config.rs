//! `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every recognised key, in rendering order.
pub const KEYS: &[&str] = &[
    "input.height",
    "input.width",
    "encoder.channels",
    "encoder.blocks_per_stage",
    "decoder.num_blocks",
    "decoder.heads",
    "decoder.attention",
    "decoder.scm",
    "decoder.head_channels",
    "decoder.num_classes",
    "decoder.ase_embed_dim",
    "decoder.resize",
    "decoder.qkv_bias",
    "train.iterations",
    "train.batch_size",
    "train.base_lr",
    "train.poly_power",
    "train.weight_decay",
    "train.seed",
    "train.train_samples",
    "train.val_samples",
    "train.eval_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|v: Vec<usize>| Error::config(format!("{key}: expected {N} comma-separated values, got {}", v.len())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }

    /// Applies every line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        let dec = &mut self.model.decoder;
        let tr = &mut self.train;
        match key {
            "input.height" => enc.height = parse(key, value)?,
            "input.width" => enc.width = parse(key, value)?,
            "encoder.channels" => enc.channels = parse_list(key, value)?,
            "encoder.blocks_per_stage" => enc.blocks_per_stage = parse(key, value)?,
            "decoder.num_blocks" => dec.num_blocks = parse(key, value)?,
            "decoder.heads" => {
                dec.heads = if value.contains(',') {
                    parse_list(key, value)?
                } else {
                    [parse(key, value)?; 3]
                }
            }
            "decoder.attention" => dec.attention = value.parse()?,
            "decoder.scm" => dec.scm = value.parse()?,
            "decoder.head_channels" => dec.head_channels = parse(key, value)?,
            "decoder.num_classes" => dec.num_classes = parse(key, value)?,
            "decoder.ase_embed_dim" => {
                dec.ase_embed_dim = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "decoder.resize" => dec.resize = value.parse()?,
            "decoder.qkv_bias" => dec.qkv_bias = parse_bool(key, value)?,
            "train.iterations" => tr.iterations = parse(key, value)?,
            "train.batch_size" => tr.batch_size = parse(key, value)?,
            "train.base_lr" => tr.base_lr = parse(key, value)?,
            "train.poly_power" => tr.poly_power = parse(key, value)?,
            "train.weight_decay" => tr.weight_decay = parse(key, value)?,
            "train.seed" => tr.seed = parse(key, value)?,
            "train.train_samples" => tr.train_samples = parse(key, value)?,
            "train.val_samples" => tr.val_samples = parse(key, value)?,
            "train.eval_every" => tr.eval_every = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        crate::train::data::check_task(
            self.model.encoder.height,
            self.model.encoder.width,
            self.model.decoder.num_classes,
        )
    }

    /// Every key with its current value, in a form [`FromStr`] reads back.
    pub fn render(&self) -> String {
        let enc = &self.model.encoder;
        let dec = &self.model.decoder;
        let tr = &self.train;
        let values = [
            enc.height.to_string(),
            enc.width.to_string(),
            join(&enc.channels),
            enc.blocks_per_stage.to_string(),
            dec.num_blocks.to_string(),
            join(&dec.heads),
            dec.attention.to_string(),
            dec.scm.to_string(),
            dec.head_channels.to_string(),
            dec.num_classes.to_string(),
            dec.ase_embed_dim.map_or("auto".into(), |d| d.to_string()),
            dec.resize.to_string(),
            dec.qkv_bias.to_string(),
            tr.iterations.to_string(),
            tr.batch_size.to_string(),
            format!("{:e}", tr.base_lr),
            tr.poly_power.to_string(),
            tr.weight_decay.to_string(),
            tr.seed.to_string(),
            tr.train_samples.to_string(),
            tr.val_samples.to_string(),
            tr.eval_every.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}
