use serde::{Deserialize, Serialize};

use crate::dense::Dense;
use crate::error::{shape_err, Error, Result};
use crate::model::{Gradients, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place. `t` is the 1-based
/// step index after incrementing.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || m.len() != params.len() || v.len() != params.len() {
        return shape_err("adam buffers differ in length");
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// First and second moments for every trainable block, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<(String, Dense, Dense)>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let moments = params
            .blocks()
            .iter()
            .filter(|b| !b.frozen)
            .map(|b| {
                let (r, c) = b.value.shape();
                (b.name.clone(), Dense::zeros(r, c), Dense::zeros(r, c))
            })
            .collect();
        Self { t: 0, moments }
    }

    /// Update every trainable block. Frozen blocks are never touched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        if grads.blocks.len() != params.blocks().len() {
            return shape_err("gradient block count differs from parameters");
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        for (block, g) in params.blocks_mut().iter_mut().zip(&grads.blocks) {
            if block.frozen {
                continue;
            }
            let (_, m, v) = self
                .moments
                .iter_mut()
                .find(|(n, _, _)| *n == block.name)
                .ok_or_else(|| Error::InvalidArgument(format!("no optimizer state for `{}`", block.name)))?;
            adam_step(block.value.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice(), self.t, cfg)?;
        }
        Ok(())
    }
}
