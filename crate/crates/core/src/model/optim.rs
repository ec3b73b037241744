use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global norm is at most this value.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.1,
            max_grad_norm: None,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config(format!("invalid AdamW settings {self:?}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!(
                    "gradient norm cap must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<DenseArray>,
    pub v: Vec<DenseArray>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            (0..params.len())
                .map(|i| DenseArray::zeros(params.get(i).shape()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update with decoupled weight decay:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + λ p)`. Frozen parameters are left alone.
    /// With a norm cap, trainable gradients are first scaled by
    /// `min(1, cap/‖g‖)` with `‖g‖` taken over all of them.
    /// `grads[i]` must match the shape of slot `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[DenseArray]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if params.is_trainable(i) && !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at optimizer step {}",
                    params.name(i),
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            max_grad_norm,
        } = self.config;
        let clip = match max_grad_norm {
            Some(cap) => {
                let norm = grads
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| params.is_trainable(i))
                    .flat_map(|(_, g)| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > cap {
                    cap / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if !params.is_trainable(i) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = clip * g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", DenseArray::scalar(v), true);
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = scalar_store(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[DenseArray::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.get(0).item().unwrap(), 1.5);
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut p = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let mut expected = 2.0;
        for _ in 0..4 {
            opt.step(&mut p, &[DenseArray::scalar(0.0)]).unwrap();
            expected *= 1.0 - 0.01 * 0.1;
            assert!((p.get(0).item().unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_unit_gradient_by_hand() {
        // With g ≡ 1 the bias-corrected moments are exactly 1 at every step:
        // step 1: m = 0.1, v = 0.02; m̂ = 0.1/0.1 = 1, v̂ = 0.02/0.02 = 1.
        // Each step then moves p by −lr·(1/(1+ε) + λp).
        let (lr, wd, eps) = (0.1, 0.01, 1e-9);
        let mut p = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr,
            weight_decay: wd,
            eps,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let step = 1.0 / (1.0 + eps);
        let p1 = 1.0 - lr * (step + wd * 1.0);
        let p2 = p1 - lr * (step + wd * p1);
        let p3 = p2 - lr * (step + wd * p2);
        for want in [p1, p2, p3] {
            opt.step(&mut p, &[DenseArray::scalar(1.0)]).unwrap();
            assert!((p.get(0).item().unwrap() - want).abs() < 1e-12);
        }
        assert!((p3 - 0.697_302_899).abs() < 1e-8);
    }

    #[test]
    fn norm_cap_rescales_the_global_gradient() {
        // Global norm of (3, 4) is 5; a cap of 1 turns them into (0.6, 0.8).
        // After one step the bias-corrected ratio is g/|g| = ±1 either way,
        // so compare the stored first moments instead.
        let mut p = ParamStore::new();
        p.insert("a", DenseArray::scalar(0.0), true);
        p.insert("b", DenseArray::scalar(0.0), true);
        let cfg = AdamWConfig {
            max_grad_norm: Some(1.0),
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[DenseArray::scalar(3.0), DenseArray::scalar(4.0)])
            .unwrap();
        assert!((opt.m[0].item().unwrap() - 0.1 * 0.6).abs() < 1e-15);
        assert!((opt.m[1].item().unwrap() - 0.1 * 0.8).abs() < 1e-15);
        let small = AdamWConfig {
            max_grad_norm: Some(10.0),
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(small, &p);
        opt.step(&mut p, &[DenseArray::scalar(3.0), DenseArray::scalar(4.0)])
            .unwrap();
        assert!((opt.m[0].item().unwrap() - 0.3).abs() < 1e-15);
        assert!(AdamWConfig {
            max_grad_norm: Some(0.0),
            ..AdamWConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn frozen_parameters_and_bad_gradients() {
        let mut p = ParamStore::new();
        p.insert("frozen", DenseArray::scalar(1.0), false);
        p.insert("w", DenseArray::scalar(1.0), true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[DenseArray::scalar(5.0), DenseArray::scalar(1.0)])
            .unwrap();
        assert_eq!(p.get(0).item().unwrap(), 1.0);
        assert!(p.get(1).item().unwrap() < 1.0);
        let err = opt
            .step(
                &mut p,
                &[DenseArray::scalar(0.0), DenseArray::scalar(f64::NAN)],
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
