//! Finite-difference verification of parameter gradients.

use rand::seq::index::sample;
use rand::Rng as _;

use super::params::{Ctx, Mode, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SeedSource;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct ParamCheckOptions {
    pub eps: f64,
    /// Coordinates probed per parameter tensor; `None` probes every scalar.
    pub coords_per_tensor: Option<usize>,
    /// Random directions over the whole parameter vector.
    pub directions: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Smallest step tried when a probe straddles a ReLU kink.
    pub min_eps: f64,
}

impl Default for ParamCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            coords_per_tensor: Some(6),
            directions: 4,
            seed: 0,
            mode: Mode::Train,
            min_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` over all probes.
    pub max_rel_error: f64,
    /// Parameter (or `direction #k`) where the maximum occurred.
    pub worst: String,
    pub tensors_checked: usize,
    pub coords_checked: usize,
    pub directions_checked: usize,
    pub params_covered: usize,
    /// Probes whose `±eps` stencil crossed a ReLU kink and were repeated
    /// with a step ten times smaller until it did not.
    pub kink_retries: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_loss(ctx: &Ctx, loss: Var) -> Result<f64> {
    let v = ctx.graph.value(loss);

    if v.numel() != 1 {
        return Err(Error::usage(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks `d loss / d θ` for the trainable parameters of `store`, where
/// `loss` is built by `f` on a fresh [`Ctx`].
///
/// Each trainable tensor has `coords_per_tensor` coordinates probed with
/// central differences (all of them when `None` or when the tensor is
/// smaller). Each random direction `v` compares `∇θ·v` with
/// `(f(θ + eps·v) - f(θ - eps·v)) / (2·eps)`, which involves every scalar.
///
/// Central differences assume the function is smooth on `[θ - eps, θ + eps]`.
/// When a ReLU input changes sign inside that interval the probe is repeated
/// with `eps / 10`, down to `min_eps`.
pub fn check_parameters<F>(store: &ParamStore, f: F, opts: &ParamCheckOptions) -> Result<ParamCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::usage(format!("gradient check needs eps > 0, got {}", opts.eps)));
    }
    let eval = |s: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut ctx = Ctx::new(s, opts.mode);
        let loss = f(&mut ctx)?;
        Ok((scalar_loss(&ctx, loss)?, ctx.graph.relu_pattern()))
    };

    let (analytic, pattern): (Vec<(ParamId, Tensor)>, Vec<bool>) = {
        let mut ctx = Ctx::new(store, opts.mode);
        let loss = f(&mut ctx)?;
        scalar_loss(&ctx, loss)?;
        let pattern = ctx.graph.relu_pattern();
        ctx.graph.backward(loss)?;
        (ctx.param_grads(), pattern)
    };

    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        tensors_checked: 0,
        coords_checked: 0,
        directions_checked: 0,
        params_covered: 0,
        kink_retries: 0,
    };
    let note = |err: f64, what: String, report: &mut ParamCheckReport| {
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = what;
        }
    };
    // central difference along `shift(store, step)`, shrinking the step off kinks
    let central = |shift: &dyn Fn(&mut ParamStore, f64), report: &mut ParamCheckReport| -> Result<f64> {
        let mut eps = opts.eps;
        loop {
            let mut plus = store.clone();
            shift(&mut plus, eps);
            let (fp, pp) = eval(&plus)?;
            let mut minus = store.clone();
            shift(&mut minus, -eps);
            let (fm, pm) = eval(&minus)?;
            let smooth = pp == pattern && pm == pattern;
            if smooth || eps / 10.0 < opts.min_eps {
                return Ok((fp - fm) / (2.0 * eps));
            }
            report.kink_retries += 1;
            eps /= 10.0;
        }
    };

    let seeds = SeedSource::new(opts.seed);
    for (id, grad) in &analytic {
        let n = grad.numel();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < n => {
                let mut rng = seeds.stream(store.name(*id));
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for &i in &coords {
            let shift = |s: &mut ParamStore, step: f64| s.get_mut(*id).data_mut()[i] += step;
            let numeric = central(&shift, &mut report)?;
            let err = rel_error(grad.data()[i], numeric);
            note(err, format!("{}[{i}]", store.name(*id)), &mut report);
        }
        report.tensors_checked += 1;
        report.coords_checked += coords.len();
        report.params_covered += n;
    }

    for k in 0..opts.directions {
        let mut rng = seeds.stream(&format!("direction-{k}"));
        let dirs: Vec<Tensor> = analytic
            .iter()
            .map(|(_, g)| Tensor::from_fn(g.shape(), |_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect();
        let total: usize = dirs.iter().map(Tensor::numel).sum();
        let norm = 1.0 / (total as f64).sqrt();
        let directional: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|((_, g), d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            * norm;
        let shift = |s: &mut ParamStore, step: f64| {
            for ((id, _), d) in analytic.iter().zip(&dirs) {
                for (p, dv) in s.get_mut(*id).data_mut().iter_mut().zip(d.data()) {
                    *p += step * norm * dv;
                }
            }
        };
        let numeric = central(&shift, &mut report)?;
        note(rel_error(directional, numeric), format!("direction #{k}"), &mut report);
        report.directions_checked += 1;
    }
    Ok(report)
}
