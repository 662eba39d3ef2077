use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the recorded gradient of a scalar function against central
/// differences `(f(x + eps·e) - f(x - eps·e)) / (2·eps)` for every element of
/// `x`, returning the largest `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::usage(format!("gradient check step must be positive, got {eps}")));
    }
    let eval = |input: Tensor, record: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let v = g.leaf(input, record);
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if value.numel() != 1 {
            return Err(Error::usage(format!(
                "gradient check needs a scalar function, got shape {:?}",
                value.shape()
            )));
        }
        let y = value.data()[0];
        if !record {
            return Ok((y, None));
        }
        if !g.requires_grad(out) {
            return Ok((y, Some(Tensor::zeros(x.shape()))));
        }
        g.backward(out)?;
        let grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((y, Some(grad)))
    };

    let (_, analytic) = eval(x.clone(), true)?;
    let analytic = analytic.expect("recorded pass returns a gradient");
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, _) = eval(plus, false)?;
        let (fm, _) = eval(minus, false)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
