//! AdamW with decoupled weight decay and a polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

/// `base_lr * (1 - t / total)^power`, zero once `t >= total`.
pub fn poly_lr(base_lr: f64, t: u64, total: u64, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    base_lr * (1.0 - t as f64 / total as f64).powf(power)
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
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("adam eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// One AdamW update of a single tensor at step `t` (1-based, already
/// incremented). Moments are kept in f64.
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let theta = param[i].f64();
        param[i] = T::of(theta - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta));
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub base_lr: f64,
    pub power: f64,
    pub total_steps: u64,
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new<T: Real>(
        params: &ParameterSet<T>,
        cfg: AdamWConfig,
        base_lr: f64,
        power: f64,
        total_steps: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let moments = params
            .iter()
            .map(|(n, t)| (n.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        Ok(OptimizerState {
            cfg,
            base_lr,
            power,
            total_steps,
            t: 0,
            moments,
        })
    }

    /// Learning rate for the next step.
    pub fn lr(&self) -> f64 {
        poly_lr(self.base_lr, self.t, self.total_steps, self.power)
    }

    /// Applies one step to every parameter that has a gradient. All
    /// gradients are checked before anything is modified.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParameterSet<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at element {i}")));
            }
            if !self.moments.contains_key(name) {
                return Err(Error::MissingParam(name.clone()));
            }
        }
        let lr = self.lr();
        self.t += 1;
        for (name, g) in grads {
            let (m, v) = self.moments.get_mut(name).unwrap();
            let p = params.get_mut(name)?;
            adamw_update(p.data_mut(), g.data(), m, v, self.t, lr, &self.cfg);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert_eq!(poly_lr(1e-4, 0, 100, 0.9), 1e-4);
        assert_eq!(poly_lr(1e-4, 100, 100, 0.9), 0.0);
        assert_eq!(poly_lr(1e-4, 250, 100, 0.9), 0.0);
        let half = poly_lr(1e-4, 50, 100, 0.9);
        assert!((half - 5.3589e-5).abs() < 1e-9);
    }

    #[test]
    fn first_step_bias_correction() {
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_update(&mut p, &[0.5], &mut m, &mut v, 1, 1e-4, &cfg);
        assert!((p[0] - (1.0 - 1e-4 * 0.5 / (0.5 + 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient() {
        let mut cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = [2.0f64, -3.0];
        adamw_update(&mut p, &[0.0, 0.0], &mut [0.0; 2], &mut [0.0; 2], 1, 1e-4, &cfg);
        assert_eq!(p, [2.0, -3.0]);
        cfg.weight_decay = 0.01;
        adamw_update(&mut p, &[0.0, 0.0], &mut [0.0; 2], &mut [0.0; 2], 1, 1e-4, &cfg);
        assert!((p[0] - 2.0 * (1.0 - 1e-6)).abs() < 1e-15);
        assert!((p[1] + 3.0 * (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = ParameterSet::new();
        params.insert("a.weight", Tensor::full([2], 1.0f64)).unwrap();
        let mut opt = OptimizerState::new(&params, AdamWConfig::default(), 1e-3, 0.9, 10).unwrap();
        let grads = BTreeMap::from([("a.weight".to_string(), Tensor::new([2], vec![0.0, f64::NAN]).unwrap())]);
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("a.weight"));
        assert_eq!(opt.t, 0);
        assert_eq!(params.get("a.weight").unwrap().data(), [1.0, 1.0]);
    }
}
