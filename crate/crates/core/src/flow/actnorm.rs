//! Per-channel affine layer with data-dependent initialisation.

use crate::nn::{Ctx, PId, Params};
use crate::tape::Var;
use crate::tensor::Tensor;

use super::FlowError;

/// Floor applied to the per-channel standard deviation at initialisation so
/// degenerate (constant) channels stay finite.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel scale (log-parameterised) and bias.
///
/// Forward maps `x = z * exp(log_scale) + bias`; the data-dependent init
/// picks the parameters so that the first training batch comes out of the
/// *inverse* pass with per-channel zero mean and unit variance.
#[derive(Debug, Clone)]
pub struct ActNorm {
    pub log_scale: PId,
    pub bias: PId,
    pub initialized: bool,
    dim: usize,
}

impl ActNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        ActNorm {
            log_scale: params.add(format!("{name}.log_scale"), Tensor::zeros(&[dim])),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            initialized: false,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Data-dependent init from the activations this layer sees on the
    /// data side (the inverse-pass input). Errors when called twice.
    pub fn init_from_batch(
        &mut self,
        params: &mut Params,
        frames: &[&Tensor],
    ) -> Result<(), FlowError> {
        if self.initialized {
            return Err(FlowError::ActNormReinit);
        }
        let d = self.dim;
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for t in frames {
            assert_eq!(t.dim(1), d, "actnorm init: channel mismatch");
            for r in 0..t.dim(0) {
                for c in 0..d {
                    mean[c] += t.at2(r, c);
                }
                count += 1;
            }
        }
        assert!(count > 0, "actnorm init: empty batch");
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0; d];
        for t in frames {
            for r in 0..t.dim(0) {
                for c in 0..d {
                    let diff = t.at2(r, c) - mean[c];
                    var[c] += diff * diff;
                }
            }
        }
        let log_scale: Vec<f64> = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR).ln())
            .collect();
        params.get_mut(self.bias).data_mut().copy_from_slice(&mean);
        params
            .get_mut(self.log_scale)
            .data_mut()
            .copy_from_slice(&log_scale);
        self.initialized = true;
        Ok(())
    }

    pub fn forward(&self, cx: &mut Ctx, z: Var) -> (Var, Var) {
        let t_len = cx.tape.value(z).dim(0) as f64;
        let ls = cx.p(self.log_scale);
        let b = cx.p(self.bias);
        let scale = cx.tape.exp(ls);
        let scaled = cx.tape.mul(z, scale);
        let out = cx.tape.add(scaled, b);
        let s = cx.tape.sum(ls);
        let logdet = cx.tape.mul_scalar(s, t_len);
        (out, logdet)
    }

    pub fn inverse(&self, cx: &mut Ctx, x: Var) -> (Var, Var) {
        let t_len = cx.tape.value(x).dim(0) as f64;
        let ls = cx.p(self.log_scale);
        let b = cx.p(self.bias);
        let centered = cx.tape.sub(x, b);
        let neg_ls = cx.tape.neg(ls);
        let inv_scale = cx.tape.exp(neg_ls);
        let out = cx.tape.mul(centered, inv_scale);
        let s = cx.tape.sum(ls);
        let logdet = cx.tape.mul_scalar(s, -t_len);
        (out, logdet)
    }
}
