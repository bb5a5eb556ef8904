//! Adam over named parameter collections.
//!
//! Parameters, gradients, and moments are keyed by name (`BTreeMap` keeps
//! iteration deterministic). A step may update any subset of parameters:
//! keys absent from the gradient map keep their value *and* their moment
//! state, and each key carries its own update count so bias correction stays
//! exact for sparsely-updated tensors (e.g. per-subject latents).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments and update counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: BTreeMap<String, u64>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update. `lr_scale` returns a per-parameter multiplier on the base
/// learning rate (1.0 for no adjustment); this is how latent tables get their
/// boosted rate without a second optimizer.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr_scale: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get_mut(name).ok_or_else(|| Error::InvalidArgument {
            context: "adam_step",
            message: format!("gradient for unknown parameter {name:?}"),
        })?;
        if g.dim() != p.dim() {
            return Err(Error::InvalidArgument {
                context: "adam_step",
                message: format!(
                    "gradient shape {:?} does not match parameter {name:?} shape {:?}",
                    g.dim(),
                    p.dim()
                ),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.dim()));
        let t = state.t.entry(name.clone()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
        let lr = cfg.lr * lr_scale(name);
        ndarray::Zip::from(&mut *p)
            .and(&mut *m)
            .and(&mut *v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}
