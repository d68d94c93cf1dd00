//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: ADAM_EPS,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Invalid(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// One update of every parameter at learning rate `lr`, then gradients are zeroed.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamConfig, lr: f64) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let (ic1, ic2) = (T::from_f64(1.0 / c1), T::from_f64(1.0 / c2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    for p in store.params_mut() {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + ob1 * g;
            p.v[i] = b2 * p.v[i] + ob2 * g * g;
            let mh = p.m[i] * ic1;
            let vh = p.v[i] * ic2;
            p.value[i] -= lr * mh / (vh.sqrt() + eps);
            p.grad[i] = T::ZERO;
        }
    }
}
