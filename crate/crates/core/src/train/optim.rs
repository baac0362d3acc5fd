//! SGD with momentum under the poly learning-rate policy.

use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::Error;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Reference initial learning rate of the schedule.
pub const DEFAULT_BASE_LR: f64 = 1e-4;
/// Initial learning rate of the desk preset. From-scratch training without
/// normalisation layers barely moves at the reference rate within 30 epochs.
pub const DESK_BASE_LR: f64 = 1e-2;
pub const DEFAULT_POLY_POWER: f64 = 0.9;

/// `base_lr * (1 - iter/total_iters)^power`, defined for `iter <= total_iters`.
pub fn poly_lr(iter: usize, base_lr: f64, power: f64, total_iters: usize) -> Result<f64, Error> {
    if total_iters == 0 || iter > total_iters {
        return Err(Error::Invalid(format!(
            "poly_lr: iteration {iter} outside [0, {total_iters}]"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// Iterations of a run: `epochs * ceil(n / batch_size)`.
pub fn total_iterations(epochs: usize, n: usize, batch_size: usize) -> usize {
    epochs * n.div_ceil(batch_size.max(1))
}

/// Velocity buffers (one per parameter, same shape) and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub velocities: Vec<Tensor<T>>,
    pub momentum: f64,
    pub base_lr: f64,
    pub poly_power: f64,
    pub total_iters: usize,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocities shaped like `store`.
    pub fn new(store: &ParameterStore<T>, momentum: f64, base_lr: f64, poly_power: f64, total_iters: usize) -> Self {
        OptimizerState {
            velocities: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
            momentum,
            base_lr,
            poly_power,
            total_iters,
        }
    }

    pub fn lr(&self, iter: usize) -> Result<f64, Error> {
        poly_lr(iter, self.base_lr, self.poly_power, self.total_iters)
    }
}

/// `v = momentum * v + g; p = p - lr * v` for every parameter, then clear
/// the gradients.
pub fn sgd_step<T: Scalar>(store: &mut ParameterStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<(), Error> {
    if state.velocities.len() != store.len() {
        return Err(Error::Invalid(format!(
            "optimizer has {} velocity buffers for {} parameters",
            state.velocities.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    if let Some(&id) = ids.iter().find(|&&id| store.grad(id).is_none()) {
        return Err(Error::MissingGradient(store.name(id).to_string()));
    }
    let m = T::from_f64_lossy(state.momentum);
    let lr = T::from_f64_lossy(lr);
    for id in ids {
        let g = store.take_grad(id).expect("checked above");
        let v = &mut state.velocities[id.index()];
        if v.shape() != g.shape() {
            return Err(Error::Invalid(format!("velocity shape mismatch for {}", store.name(id))));
        }
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = m * *vi + gi;
        }
        if lr != T::zero() {
            for (pi, &vi) in store.value_mut(id).data_mut().iter_mut().zip(v.data()) {
                *pi = *pi - lr * vi;
            }
        }
    }
    Ok(())
}
