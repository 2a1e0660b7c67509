use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};

/// Adam hyperparameters plus the multiplicative per-epoch learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            decay: 0.5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so frozen-parameter runs can be expressed.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config("decay must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch.saturating_sub(1) as i32)
    }

    /// Copy of this config with the learning rate for `epoch`.
    pub fn for_epoch(&self, epoch: usize) -> Self {
        Self {
            lr: self.lr_at_epoch(epoch),
            ..*self
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient in parameter {}",
            p.name
        )));
    }
    for p in store.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let g = p.grad.data();
        let (m, v, theta) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.grad.data_mut().fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn zero_gradient_leaves_values_and_counts_step() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::from_rows(&[&[0.3, -1.2]])).unwrap();
        let before = store.get(id).value.clone();
        adam_step(&mut store, &AdamConfig::default()).unwrap();
        assert_eq!(store.get(id).value, before);
        assert_eq!(store.get(id).step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let cfg = AdamConfig::default();
        adam_step(&mut store, &cfg).unwrap();
        let moved = 2.0 - store.get(id).value.item();
        assert!((moved - 1e-4).abs() < 1e-11, "moved {moved}");
        assert_eq!(store.get(id).grad.item(), 0.0);
    }

    #[test]
    fn decay_halves_each_epoch() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr_at_epoch(1), 1e-4);
        assert_eq!(cfg.lr_at_epoch(2), 5e-5);
        assert_eq!(cfg.lr_at_epoch(3), 2.5e-5);
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut store = ParameterStore::new();
        store.add("ok", Tensor::scalar(1.0)).unwrap();
        let bad = store.add("broken", Tensor::scalar(1.0)).unwrap();
        store.get_mut(bad).grad = Tensor::scalar(f64::NAN);
        let err = adam_step(&mut store, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("broken"));
        assert_eq!(store.get(bad).step, 0);
    }

    #[test]
    fn validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let bad = AdamConfig {
            beta2: 1.0,
            ..AdamConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
