use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Momentum buffers, one per store entry (buffers of non-trainable entries
/// stay empty).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, store: &ParamStore) -> Self {
        let velocity = store
            .entries()
            .iter()
            .map(|e| if e.trainable { Tensor::zeros(e.value.shape()) } else { Tensor::zeros(&[0]) })
            .collect();
        Self { config, velocity }
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v` over trainable entries, then
/// zeroes the gradients. Non-finite gradients abort before anything changes.
pub fn sgd_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<(), TrainError> {
    if state.velocity.len() != store.len() {
        return Err(TrainError::Optimizer(format!(
            "optimizer tracks {} entries, store has {}",
            state.velocity.len(),
            store.len()
        )));
    }
    for (e, v) in store.entries().iter().zip(&state.velocity) {
        if e.trainable && v.shape() != e.value.shape() {
            return Err(TrainError::Optimizer(format!("momentum buffer shape mismatch for {}", e.name)));
        }
        if e.trainable && !e.grad.is_finite() {
            return Err(TrainError::NonFiniteGradient(e.name.clone()));
        }
    }
    let SgdConfig { lr, momentum, weight_decay } = state.config;
    for (e, v) in store.entries_mut().iter_mut().zip(&mut state.velocity) {
        if !e.trainable {
            continue;
        }
        let p = e.value.data_mut();
        for ((p, v), g) in p.iter_mut().zip(v.data_mut()).zip(e.grad.data()) {
            *v = momentum * *v + (g + weight_decay * *p);
            *p -= lr * *v;
        }
    }
    store.zero_grads();
    Ok(())
}
