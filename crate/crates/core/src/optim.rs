use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `params` with learning rate `lr`.
    ///
    /// `grads[i]` belongs to the i-th parameter; `None` means the parameter
    /// received no gradient this step and is treated as zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<&[f32]>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params.tensor(i).numel() {
                    return Err(Error::shape(
                        "optimizer_step",
                        params.tensor(i).shape(),
                        &[g.len()],
                    ));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter `{}`",
                        params.name(i)
                    )));
                }
            }
        }
        if self.m.is_empty() {
            self.m = (0..params.len())
                .map(|i| vec![0.0; params.tensor(i).numel()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j] as f64);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= (lr * mhat / (libm::sqrt(vhat) + eps)) as f32;
            }
        }
        Ok(())
    }
}
