//! SGD with classic momentum and the warmup plus cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One update on raw buffers: `v ← m·v + g + wd·p; p ← p − lr·v`.
pub fn sgd_step<F: Scalar>(
    param: &mut [F],
    grad: &[F],
    velocity: &mut [F],
    lr: F,
    momentum: F,
    weight_decay: F,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(dim_err(
            "sgd_step",
            format!(
                "param {} / grad {} / velocity {} elements",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum state for every parameter of a store. Buffers are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub cfg: SgdConfig,
    /// One velocity per store entry, in store order.
    pub velocity: Vec<Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(store: &ParamStore<F>, cfg: SgdConfig) -> Self {
        let velocity = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self { cfg, velocity }
    }

    /// Applies the accumulated gradients of `store`.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        let (lr, m, wd) = (
            F::from_f64(lr),
            F::from_f64(self.cfg.momentum),
            F::from_f64(self.cfg.weight_decay),
        );
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if !p.requires_grad {
                continue;
            }
            sgd_step(p.value.data_mut(), p.grad.data(), v.data_mut(), lr, m, wd)?;
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay to
/// zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / (warmup_steps + 1) as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let t = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}
