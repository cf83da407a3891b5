//! Bias-corrected Adam keyed by parameter name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Optimizer state: first/second moment per parameter name plus the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts one optimization step; call before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::usage(format!(
                "adam: gradient shape {:?} does not match parameter {:?} ({name})",
                grad.shape(),
                param.shape()
            )));
        }
        if self.step == 0 {
            return Err(Error::usage("adam: update before begin_step".to_string()));
        }
        let (m1, m2) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.cfg.lr;
        let eps = self.cfg.eps;
        let (md, vd) = (m1.data_mut(), m2.data_mut());
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Moment tensors in name order, for checkpointing.
    pub fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor, &Tensor)) {
        for (name, (m1, m2)) in &self.moments {
            f(name, m1, m2);
        }
    }

    pub fn restore_moment(&mut self, name: &str, m1: Tensor, m2: Tensor) {
        self.moments.insert(name.to_string(), (m1, m2));
    }

    pub fn restore_step(&mut self, step: u64) {
        self.step = step;
    }
}
