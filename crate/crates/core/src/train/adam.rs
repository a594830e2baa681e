//! Adaptive-moment optimiser with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::tensor::Tensor;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Bias-corrected first/second moments, aligned with the parameter arena.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &Params) -> Self {
        let m = params
            .ids()
            .map(|id| vec![0.0; params.get(id).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { cfg, step: 0, m, v }
    }

    /// One update over all parameters. `grads` must be in arena order.
    /// Returns the pre-clip global gradient norm.
    pub fn apply(&mut self, params: &mut Params, grads: &[Tensor]) -> Result<f64, TrainError> {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        let mut sq_norm = 0.0;
        for (id, g) in params.ids().zip(grads) {
            for &v in g.data() {
                if !v.is_finite() {
                    return Err(TrainError::NonFiniteGradient {
                        param: params.name(id).to_string(),
                    });
                }
                sq_norm += v * v;
            }
        }
        let norm = sq_norm.sqrt();
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[idx].data();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
        Ok(norm)
    }
}
