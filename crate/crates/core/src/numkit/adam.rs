use std::collections::BTreeMap;

use super::{Matrix, ParamStore};
use crate::Result;

/// Adam with bias correction. Moments are keyed by parameter name and
/// created lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every leaf in `store` from its current gradient.
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for leaf in store.leaves_mut() {
            let (r, c) = leaf.value.shape();
            let m = self
                .m
                .entry(leaf.name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            let v = self
                .v
                .entry(leaf.name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            let grads = leaf.grad.data();
            for (k, theta) in leaf.value.data_mut().iter_mut().enumerate() {
                let g = grads[k];
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * g;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * g * g;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
