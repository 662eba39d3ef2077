use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `base_lr · (1 − iter/iterations)^power` for `iter` in `0..iterations`.
pub fn poly_lr(iter: usize, iterations: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter >= iterations {
        return Err(Error::usage(format!(
            "iteration {iter} is outside the schedule of {iterations} iterations"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / iterations as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are created lazily per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every gradient is checked first, so a non-finite
    /// gradient leaves both the parameters and the optimizer state untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    store.name(*id),
                    store.get(*id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {}",
                    store.name(*id)
                )));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let decay = 1.0 - lr * weight_decay;
        for (id, g) in grads {
            let i = id.index();
            if self.moments.len() <= i {
                self.moments.resize(i + 1, None);
            }
            let (m, v) = self.moments[i].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let (mh, vh) = (*mk / c1, *vk / c2);
                p[k] = p[k] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Init};
    use crate::rng::SeedSource;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = Builder::new(&mut store, SeedSource::new(0))
            .param("p", &[values.len()], Init::Zeros)
            .unwrap();
        store.set(id, Tensor::new(&[values.len()], values).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0, 2000, 1e-4, 1.0).unwrap(), 1e-4);
        assert!((poly_lr(1000, 2000, 1e-4, 1.0).unwrap() - 5e-5).abs() < 1e-20);
        assert!(matches!(poly_lr(2000, 2000, 1e-4, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let (mut store, id) = store_with(vec![1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = Tensor::new(&[3], vec![0.3, -4.0, 1e-3]).unwrap();
        opt.step(&mut store, &[(id, g.clone())], 0.01).unwrap();
        // after bias correction m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε)
        for (k, (&p, &p0)) in store.get(id).data().iter().zip(&[1.0, -2.0, 0.5]).enumerate() {
            let gk = g.data()[k];
            let expected = p0 - 0.01 * gk / (gk.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let (mut store, id) = store_with(vec![2.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        for _ in 0..3 {
            opt.step(&mut store, &[(id, Tensor::zeros(&[1]))], 0.5).unwrap();
        }
        assert!((store.get(id).data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut store, id) = store_with(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store, &[(id, Tensor::full(&[1], f64::NAN))], 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains('p')));
        assert_eq!(store.get(id).data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
