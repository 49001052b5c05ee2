//! Adam with a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied to the learning rate every `decay_interval` steps.
    pub decay: f64,
    pub decay_interval: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay: 0.5,
            decay_interval: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        if !(config.learning_rate > 0.0) || config.decay_interval == 0 {
            return Err(NnError::Shape("learning rate must be positive, decay interval non-zero".into()));
        }
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Scheduled learning rate for the next update.
    pub fn learning_rate(&self) -> f64 {
        let decays = self.step / self.config.decay_interval;
        self.config.learning_rate * self.config.decay.powi(decays as i32)
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<StepOutcome> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NnError::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let lr = self.learning_rate();
        self.step += 1;
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
