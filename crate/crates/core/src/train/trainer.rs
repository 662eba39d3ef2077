use std::fmt::Write as _;
use std::path::Path;

use super::data::{gen_split, stack, SyntheticSample};
use super::metrics::ConfusionMatrix;
use super::optim::{poly_lr, AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{checkpoint, Ctx, Mode, ParamStore};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    /// Seeds both parameter initialization and data generation.
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Validation runs after every `eval_every` iterations and after the last one.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            base_lr: 2e-3,
            poly_power: 1.0,
            weight_decay: 0.01,
            seed: 0,
            train_samples: 400,
            val_samples: 100,
            eval_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.iterations", self.iterations),
            ("train.batch_size", self.batch_size),
            ("train.train_samples", self.train_samples),
            ("train.val_samples", self.val_samples),
            ("train.eval_every", self.eval_every),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{key} must be at least 1")));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config(format!("train.base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return Err(Error::config("train.poly_power must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub final_miou: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

pub fn metrics_csv(log: &[LogRow]) -> String {
    let mut s = String::from("iter,lr,loss,miou\n");
    for r in log {
        let _ = write!(s, "{},{},{},", r.iter, r.lr, r.loss);
        if let Some(m) = r.miou {
            let _ = write!(s, "{m}");
        }
        s.push('\n');
    }
    s
}

/// Trailing moving average; entry `i` averages `values[i+1-window..=i]`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Dataset-level mIoU of the model's argmax prediction in eval mode.
pub fn evaluate(model: &Model, store: &ParamStore, samples: &[SyntheticSample], batch_size: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(model.cfg.decoder.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, labels) = stack(chunk)?;
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.graph.constant(images);
        let logits = model.forward(&mut ctx, x)?;
        let pred = ctx.graph.value(logits).argmax_axis1()?;
        cm.add(&pred, &labels)?;
    }
    Ok(cm.report()?.mean)
}

/// Trains on a fixed synthetic set, visiting it in the same order every epoch.
///
/// With `out` set, the metrics log and final parameters are written there.
/// A non-finite loss or gradient stops training; the last parameters that
/// produced a finite loss are still written.
pub fn train(model: &Model, store: &mut ParamStore, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let (h, w) = (model.cfg.encoder.height, model.cfg.encoder.width);
    let k = model.cfg.decoder.num_classes;
    let train_set = gen_split(cfg.train_samples, h, w, k, cfg.seed, "train")?;
    let val_set = gen_split(cfg.val_samples, h, w, k, cfg.seed, "val")?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut final_miou = f64::NAN;

    let finish = |log: &[LogRow], store: &ParamStore| -> Result<()> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(METRICS_FILE), metrics_csv(log))?;
            checkpoint::save(store, dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    };

    // parameters that last produced a finite loss
    let mut last_good = store.clone();
    for it in 0..cfg.iterations {
        let lr = poly_lr(it, cfg.iterations, cfg.base_lr, cfg.poly_power)?;
        let batch = (0..cfg.batch_size).map(|b| &train_set[(it * cfg.batch_size + b) % train_set.len()]);
        let (images, labels) = stack(batch)?;

        let (loss, grads, updates) = {
            let mut ctx = Ctx::new(store, Mode::Train);
            let (loss, _) = model.loss(&mut ctx, &images, &labels)?;
            let value = ctx.graph.value(loss).data()[0];
            if !value.is_finite() {
                finish(&log, &last_good)?;
                return Err(Error::Numerical(format!("loss became {value} at iteration {it}")));
            }
            ctx.graph.backward(loss)?;
            (value, ctx.param_grads(), ctx.take_running_updates())
        };
        last_good.clone_from(store);
        if let Err(e) = opt.step(store, &grads, lr) {
            finish(&log, store)?;
            return Err(match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} at iteration {it}")),
                other => other,
            });
        }
        store.apply_running_updates(updates)?;

        let last = it + 1 == cfg.iterations;
        let miou = if (it + 1) % cfg.eval_every == 0 || last {
            let m = evaluate(model, store, &val_set, cfg.batch_size)?;
            final_miou = m;
            Some(m)
        } else {
            None
        };
        log.push(LogRow { iter: it, lr, loss, miou });
    }
    finish(&log, store)?;
    Ok(TrainReport { log, final_miou })
}
