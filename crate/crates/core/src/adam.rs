//! Adam parameter updates with bias correction.

use std::collections::BTreeMap;

use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates per trainable parameter plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of all trainable parameters. Gradients are validated
    /// before anything mutates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("adam: learning rate must be positive, got {lr}")));
        }
        let names = params.trainable_names();
        for name in &names {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("adam: missing gradient for {name}")))?;
            let p = params.get(name)?;
            if g.shape != p.shape {
                return Err(Error::ShapeMismatch {
                    context: format!("adam gradient for {name}"),
                    detail: format!("{:?} vs {:?}", g.shape, p.shape),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { context: format!("adam gradient for {name}"), step: None });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for name in &names {
            let g = grads.get(name).unwrap();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&g.shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&g.shape));
            let p = params.get_mut(name)?;
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
