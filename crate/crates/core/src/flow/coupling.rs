//! Affine coupling layer with temporal-convolution conditioning.
//!
//! Half the channels pass through untouched; the other half receive a
//! per-frame elementwise affine transform whose scale and shift are computed
//! from the untouched half by a small stack of non-causal 1-D convolutions.
//! Because only the identity half feeds the conditioning network, the layer
//! inverts exactly and the log-determinant is the sum of the log scales.

use rand::Rng;

use crate::nn::{Ctx, PId, Params};
use crate::tape::Var;
use crate::tensor::Tensor;

use super::FlowError;

/// Additive floor on the coupling scale; bounds the log-determinant away
/// from -inf and keeps inversion well conditioned.
pub const ALPHA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Coupling {
    /// When set, the identity half is the upper channel block instead of the
    /// lower one. Alternated between consecutive layers in a stack.
    pub swap: bool,
    convs: Vec<ConvSpec>,
    dim: usize,
    half: usize,
}

#[derive(Debug, Clone)]
struct ConvSpec {
    w: PId,
    b: PId,
    dilation: usize,
    kernel: usize,
}

impl Coupling {
    /// `n_convs` convolutions of width `kernel` with tanh in between; the
    /// final one is zero-initialised (bias picked so the initial transform is
    /// the identity: alpha = 1, beta = 0).
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        dim: usize,
        hidden: usize,
        n_convs: usize,
        kernel: usize,
        dilation: usize,
        swap: bool,
        rng: &mut R,
    ) -> Result<Self, FlowError> {
        if dim % 2 != 0 {
            return Err(FlowError::OddChannels(dim));
        }
        assert!(n_convs >= 1 && kernel % 2 == 1);
        let half = dim / 2;
        let mut convs = Vec::with_capacity(n_convs);
        for i in 0..n_convs {
            let c_in = if i == 0 { half } else { hidden };
            let c_out = if i + 1 == n_convs { 2 * half } else { hidden };
            let last = i + 1 == n_convs;
            let std = if last {
                0.0
            } else {
                (1.0 / (c_in * kernel) as f64).sqrt()
            };
            let w = params.add(
                format!("{name}.conv{i}.w"),
                Tensor::randn(&[c_out, c_in, kernel], std, rng),
            );
            let mut bias = Tensor::zeros(&[c_out]);
            if last {
                // softplus(b) + floor = 1  =>  identity scale at init
                let b0 = inv_softplus(1.0 - ALPHA_FLOOR);
                for s in 0..half {
                    bias.data_mut()[s] = b0;
                }
            }
            let b = params.add(format!("{name}.conv{i}.b"), bias);
            convs.push(ConvSpec {
                w,
                b,
                dilation,
                kernel,
            });
        }
        Ok(Coupling {
            swap,
            convs,
            dim,
            half,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Maximum |t' - t| over which a frame can influence the output.
    pub fn receptive_field(&self) -> usize {
        self.convs
            .iter()
            .map(|c| (c.kernel - 1) / 2 * c.dilation)
            .sum()
    }

    /// Raw bias handle of the final conv; tests use it to pin alpha/beta.
    pub fn final_bias(&self) -> PId {
        self.convs.last().unwrap().b
    }

    fn identity_cols(&self) -> (usize, usize) {
        if self.swap {
            (self.half, self.dim)
        } else {
            (0, self.half)
        }
    }

    fn transformed_cols(&self) -> (usize, usize) {
        if self.swap {
            (0, self.half)
        } else {
            (self.half, self.dim)
        }
    }

    /// Conditioning network: identity half -> per-frame (alpha, beta).
    fn alpha_beta(&self, cx: &mut Ctx, z_id: Var) -> (Var, Var) {
        let mut cur = z_id;
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            let w = cx.p(conv.w);
            let b = cx.p(conv.b);
            cur = cx.tape.conv1d(cur, w, b, conv.dilation);
            if i + 1 < n {
                cur = cx.tape.tanh(cur);
            }
        }
        let s_raw = cx.tape.slice_cols(cur, 0, self.half);
        let beta = cx.tape.slice_cols(cur, self.half, 2 * self.half);
        let sp = cx.tape.softplus(s_raw);
        let alpha = cx.tape.add_scalar(sp, ALPHA_FLOOR);
        (alpha, beta)
    }

    fn merge(&self, cx: &mut Ctx, identity: Var, transformed: Var) -> Var {
        if self.swap {
            cx.tape.concat_cols(transformed, identity)
        } else {
            cx.tape.concat_cols(identity, transformed)
        }
    }

    pub fn forward(&self, cx: &mut Ctx, z: Var) -> (Var, Var) {
        let (i0, i1) = self.identity_cols();
        let (t0, t1) = self.transformed_cols();
        let z_id = cx.tape.slice_cols(z, i0, i1);
        let z_tr = cx.tape.slice_cols(z, t0, t1);
        let (alpha, beta) = self.alpha_beta(cx, z_id);
        let scaled = cx.tape.mul(alpha, z_tr);
        let out_tr = cx.tape.add(scaled, beta);
        let out = self.merge(cx, z_id, out_tr);
        let la = cx.tape.log(alpha);
        let logdet = cx.tape.sum(la);
        (out, logdet)
    }

    pub fn inverse(&self, cx: &mut Ctx, x: Var) -> (Var, Var) {
        let (i0, i1) = self.identity_cols();
        let (t0, t1) = self.transformed_cols();
        let x_id = cx.tape.slice_cols(x, i0, i1);
        let x_tr = cx.tape.slice_cols(x, t0, t1);
        let (alpha, beta) = self.alpha_beta(cx, x_id);
        let shifted = cx.tape.sub(x_tr, beta);
        let out_tr = cx.tape.div(shifted, alpha);
        let out = self.merge(cx, x_id, out_tr);
        let la = cx.tape.log(alpha);
        let s = cx.tape.sum(la);
        let logdet = cx.tape.neg(s);
        (out, logdet)
    }
}

/// Inverse of softplus: `y = ln(1 + e^x)  =>  x = ln(e^y - 1)`.
pub fn inv_softplus(y: f64) -> f64 {
    (y.exp_m1()).ln()
}
