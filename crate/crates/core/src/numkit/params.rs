use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::{Error, Result};

/// A trainable matrix together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLeaf {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamLeaf {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamLeaf {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Running statistics of one batch-norm layer.
///
/// The learnable scale and shift live in the owning [`ParamStore`] as the
/// leaves `<layer>.gamma` and `<layer>.beta` so the optimizer sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Per-feature batch mean and biased variance observed in a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Every trainable leaf and batch-norm state of one model, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    leaves: BTreeMap<String, ParamLeaf>,
    batch_norms: BTreeMap<String, BatchNormState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        self.leaves.insert(name.clone(), ParamLeaf::new(name, value));
    }

    /// Registers a batch-norm layer: its state plus `gamma = 1`, `beta = 0`.
    pub fn insert_batch_norm(&mut self, name: impl Into<String>, width: usize) {
        let name = name.into();
        self.insert(format!("{name}.gamma"), Matrix::filled(1, width, 1.0));
        self.insert(format!("{name}.beta"), Matrix::zeros(1, width));
        self.batch_norms.insert(name, BatchNormState::new(width));
    }

    pub fn leaf(&self, name: &str) -> Result<&ParamLeaf> {
        self.leaves
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn leaf_mut(&mut self, name: &str) -> Result<&mut ParamLeaf> {
        self.leaves
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.leaf(name).map(|l| &l.value)
    }

    pub fn batch_norm(&self, name: &str) -> Result<&BatchNormState> {
        self.batch_norms
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn batch_norm_mut(&mut self, name: &str) -> Result<&mut BatchNormState> {
        self.batch_norms
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn leaves(&self) -> impl Iterator<Item = &ParamLeaf> {
        self.leaves.values()
    }

    pub fn leaves_mut(&mut self) -> impl Iterator<Item = &mut ParamLeaf> {
        self.leaves.values_mut()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = (&String, &BatchNormState)> {
        self.batch_norms.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.leaves_mut().for_each(ParamLeaf::zero_grad);
    }

    /// Folds train-mode batch statistics into the named running states.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in stats {
            self.batch_norm_mut(name)?.update(s);
        }
        Ok(())
    }

    /// `name=‖value‖` pairs, used in diagnostics.
    pub fn norm_summary(&self) -> String {
        self.leaves
            .values()
            .map(|l| format!("{}={:.4e}", l.name, l.value.frobenius_norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_registration() {
        let mut store = ParamStore::new();
        store.insert_batch_norm("enc1.bn", 3);
        assert_eq!(store.value("enc1.bn.gamma").unwrap().data(), &[1.0; 3]);
        assert_eq!(store.value("enc1.bn.beta").unwrap().data(), &[0.0; 3]);
        let bn = store.batch_norm("enc1.bn").unwrap();
        assert_eq!(bn.running_mean, vec![0.0; 3]);
        assert_eq!(bn.running_var, vec![1.0; 3]);
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut bn = BatchNormState::new(1);
        bn.update(&BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        });
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn unknown_names_error() {
        let store = ParamStore::new();
        assert_eq!(
            store.leaf("nope").unwrap_err(),
            Error::UnknownParam("nope".into())
        );
    }
}
