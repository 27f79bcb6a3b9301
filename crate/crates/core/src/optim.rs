//! SGD-with-momentum and Adam parameter updates.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

#[derive(Clone, Debug, Default)]
struct SlotState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Optimizer with per-parameter state buffers mirroring parameter shapes.
/// Slots with no gradient in a step keep their state untouched.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    state: Vec<SlotState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, param_count: usize) -> Self {
        let mut state = Vec::with_capacity(param_count);
        state.resize_with(param_count, SlotState::default);
        Optimizer { kind, lr, state }
    }

    /// Apply one update. `grads[i]` pairs with `params[i]`; `None` skips
    /// the slot entirely.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.len() {
            return Err(Error::LengthMismatch {
                op: "optimizer_step",
                left: params.len(),
                right: grads.len(),
            });
        }
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    detail: format!("slot {slot}: {:?} vs {:?}", param.shape(), grad.shape()),
                });
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
            let state = &mut self.state[slot];
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    if state.m.is_empty() {
                        state.m = alloc::vec![0.0; param.numel()];
                    }
                    for ((p, g), m) in
                        param.data_mut().iter_mut().zip(grad.data()).zip(state.m.iter_mut())
                    {
                        *m = momentum * *m + g;
                        *p -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    if state.m.is_empty() {
                        state.m = alloc::vec![0.0; param.numel()];
                        state.v = alloc::vec![0.0; param.numel()];
                    }
                    state.steps += 1;
                    let t = state.steps as i32;
                    let bc1 = 1.0 - libm::pow(beta1, t as f64);
                    let bc2 = 1.0 - libm::pow(beta2, t as f64);
                    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = state.m[i] / bc1;
                        let v_hat = state.v[i] / bc2;
                        *p -= self.lr * m_hat / (scalar::sqrt(v_hat) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so the global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = scalar::sqrt(total);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}
