//! Adam over a deduplicated set of parameter slots.

use std::collections::HashMap;

use crate::autodiff::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment of one parameter, stored under the first name it
/// was registered with.
#[derive(Clone, Debug, PartialEq)]
pub struct Moment {
    pub name: String,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

/// One parameter as seen by a step: its name, handle and whether the owning
/// group is frozen.
pub struct StepParam<'a> {
    pub name: &'a str,
    pub param: &'a Param<f32>,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    moments: Vec<Moment>,
    by_name: HashMap<String, usize>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Restores moments saved by [`Adam::moments`].
    pub fn with_state(config: AdamConfig, t: u64, moments: Vec<Moment>) -> Self {
        let by_name = moments
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        Self {
            config,
            t,
            moments,
            by_name,
        }
    }

    pub fn moments(&self) -> &[Moment] {
        &self.moments
    }

    /// Applies one update to every trainable, non-frozen parameter and then
    /// zeroes all gradients. Parameters reachable under several names (tied
    /// weights) are updated once. A non-finite gradient aborts before any
    /// parameter changes.
    pub fn step(&mut self, params: &[StepParam<'_>]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut active = Vec::new();
        for p in params {
            if !p.param.is_trainable() || !seen.insert(p.param.id()) {
                continue;
            }
            if p.frozen {
                continue;
            }
            if !p.param.read().grad.all_finite() {
                return Err(Error::Divergence {
                    phase: "optimizer",
                    step: self.t,
                    detail: format!("non-finite gradient in {}", p.name),
                });
            }
            active.push(p);
        }

        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let bc1 = 1.0 - (b1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (b2 as f64).powi(self.t as i32);
        for p in active {
            let idx = match self.by_name.get(p.name) {
                Some(&i) => i,
                None => {
                    let shape = p.param.read().value.shape().to_vec();
                    self.moments.push(Moment {
                        name: p.name.to_string(),
                        m: Tensor::zeros(&shape),
                        v: Tensor::zeros(&shape),
                    });
                    self.by_name
                        .insert(p.name.to_string(), self.moments.len() - 1);
                    self.moments.len() - 1
                }
            };
            let mom = &mut self.moments[idx];
            let mut slot = p.param.write();
            let slot = &mut *slot;
            let grad = slot.grad.data();
            let value = slot.value.data_mut();
            for (((w, &g), m), v) in value
                .iter_mut()
                .zip(grad)
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        for p in params {
            p.param.write().grad.fill(0.0);
        }
        Ok(())
    }
}
