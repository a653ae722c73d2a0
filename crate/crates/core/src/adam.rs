//! Sparse Adam.
//!
//! Moments and the step counter live per parameter key; a key's counter
//! advances only when that key receives a gradient, which keeps bias
//! correction meaningful under sparse updates.

use std::collections::HashMap;

use crate::error::{KgError, Result};
use crate::params::ParamKey;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-key first/second moments plus step count.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamSlot {
    pub fn new(shape: Vec<usize>) -> Self {
        AdamSlot {
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    slots: HashMap<ParamKey, AdamSlot>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot_mut(&mut self, key: ParamKey, shape: &[usize]) -> &mut AdamSlot {
        self.slots
            .entry(key)
            .or_insert_with(|| AdamSlot::new(shape.to_vec()))
    }

    pub fn slot(&self, key: ParamKey) -> Option<&AdamSlot> {
        self.slots.get(&key)
    }

    /// Bias-corrected Adam step on one key.
    pub fn apply(
        &mut self,
        key: ParamKey,
        value: &mut Tensor,
        grad: &Tensor,
        hyper: &AdamHyper,
    ) -> Result<()> {
        if grad.shape() != value.shape() {
            return Err(KgError::Dimension(format!(
                "adam: gradient shape {:?} does not match parameter {key} shape {:?}",
                grad.shape(),
                value.shape()
            )));
        }
        let slot = self.slot_mut(key, value.shape());
        adam_apply(slot, value, grad, hyper);
        Ok(())
    }
}

/// The update rule itself, shared by the local trainer and the shard
/// servers.
pub fn adam_apply(slot: &mut AdamSlot, value: &mut Tensor, grad: &Tensor, hyper: &AdamHyper) {
    slot.t += 1;
    let t = slot.t as i32;
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let m = slot.m.data_mut();
    let v = slot.v.data_mut();
    let x = value.data_mut();
    let g = grad.data();
    for i in 0..x.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        x[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn first_step_matches_scalar_oracle() {
        // g = 1, lr = 0.001:
        // Δ = −lr · (0.1/(1−0.9)) / (√(0.001/(1−0.999)) + ε)
        let hyper = AdamHyper::default();
        let mut slot = AdamSlot::new(vec![1]);
        let mut value = Tensor::vector(vec![0.0]);
        let grad = Tensor::vector(vec![1.0]);
        adam_apply(&mut slot, &mut value, &grad, &hyper);
        let expected = -0.001 * (0.1 / (1.0 - 0.9)) / ((0.001f64 / (1.0 - 0.999)).sqrt() + 1e-8);
        assert!((value.data()[0] - expected).abs() < 1e-15);
        assert!((slot.m.data()[0] - 0.1).abs() < 1e-15);
        assert!((slot.v.data()[0] - 0.001).abs() < 1e-15);
        assert_eq!(slot.t, 1);
    }

    #[test]
    fn absent_key_leaves_parameter_untouched() {
        let mut state = AdamState::new();
        let key = ParamKey::new(ParamKind::EntityEmb, 0);
        let hyper = AdamHyper::default();
        let value = Tensor::vector(vec![1.0, 2.0]);
        let before = value.clone();
        // No gradient arrives for `key`; nothing to apply.
        assert!(state.slot(key).is_none());
        let _ = &mut state;
        assert_eq!(value, before);
        // And applying to a different key does not disturb this one.
        let other = ParamKey::new(ParamKind::EntityEmb, 1);
        let mut other_val = Tensor::vector(vec![0.5, 0.5]);
        state
            .apply(other, &mut other_val, &Tensor::vector(vec![1.0, 1.0]), &hyper)
            .unwrap();
        assert_eq!(value, before);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut state = AdamState::new();
        let key = ParamKey::new(ParamKind::EntityEmb, 0);
        let mut value = Tensor::vector(vec![1.0, 2.0]);
        let grad = Tensor::vector(vec![1.0]);
        assert!(matches!(
            state.apply(key, &mut value, &grad, &AdamHyper::default()),
            Err(KgError::Dimension(_))
        ));
    }
}
