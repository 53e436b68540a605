use serde::{Deserialize, Serialize};

use super::{GradientVector, ParameterVector};
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, ..Self::default() }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, ..Self::default() }
    }

    /// Returns the name of the first out-of-range field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if self.kind == OptimizerKind::Adam {
            if !(0.0..1.0).contains(&self.beta1) {
                return Err(("beta1", format!("must be in [0, 1), got {}", self.beta1)));
            }
            if !(0.0..1.0).contains(&self.beta2) {
                return Err(("beta2", format!("must be in [0, 1), got {}", self.beta2)));
            }
            if !(self.eps > 0.0) {
                return Err(("eps", format!("must be > 0, got {}", self.eps)));
            }
        }
        Ok(())
    }
}

/// Per-run optimizer state. Adam moments start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        let (m, v) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
        };
        Self { config, m, v, step: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParameterVector, grad: &GradientVector) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters but {} gradient entries",
                params.len(),
                grad.len()
            )));
        }
        let lr = self.config.lr;
        self.step += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grad.as_slice()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != grad.len() {
                    return Err(Error::DimensionMismatch("Adam buffers sized for another model".into()));
                }
                let OptimizerConfig { beta1, beta2, eps, .. } = self.config;
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let values = params.values_mut();
                for i in 0..values.len() {
                    let g = grad.as_slice()[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if !math::all_finite(params.values()) {
            return Err(Error::NonFinite(format!("parameters after optimizer step {}", self.step)));
        }
        Ok(())
    }
}
