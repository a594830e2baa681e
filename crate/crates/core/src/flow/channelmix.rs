//! Invertible channel mixing ("1×1 convolution") in LU form.
//!
//! The mixing matrix is stored as `W = P L U` with a fixed permutation `P`,
//! unit-lower-triangular `L` and upper-triangular `U` whose diagonal is kept
//! as a fixed sign and a trainable log-magnitude. `|det W|` is therefore
//! positive by construction and the log-determinant costs O(D).

use rand::Rng;

use crate::nn::{Ctx, PId, Params};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ChannelMix {
    pub l_raw: PId,
    pub u_raw: PId,
    pub u_log_diag: PId,
    perm: Vec<usize>, // p_matrix[perm[k], k] = 1
    sign: Vec<f64>,
    dim: usize,
}

impl ChannelMix {
    /// Initialise from a random rotation so the mix starts volume-preserving.
    pub fn new<R: Rng>(params: &mut Params, name: &str, dim: usize, rng: &mut R) -> Self {
        let q = random_orthogonal(dim, rng);
        Self::from_matrix(params, name, &q, dim)
    }

    /// LU-factorise an invertible matrix into the stored parameterisation.
    pub fn from_matrix(params: &mut Params, name: &str, w: &[f64], dim: usize) -> Self {
        let (piv, l, u) = lu_decompose(w, dim);
        let mut l_raw = vec![0.0; dim * dim];
        let mut u_raw = vec![0.0; dim * dim];
        let mut sign = vec![0.0; dim];
        let mut u_log_diag = vec![0.0; dim];
        for r in 0..dim {
            for c in 0..r {
                l_raw[r * dim + c] = l[r * dim + c];
            }
            for c in r + 1..dim {
                u_raw[r * dim + c] = u[r * dim + c];
            }
            let d = u[r * dim + r];
            assert!(d != 0.0, "channel mix factorisation produced a zero pivot");
            sign[r] = d.signum();
            u_log_diag[r] = d.abs().ln();
        }
        ChannelMix {
            l_raw: params.add(format!("{name}.l"), Tensor::new(vec![dim, dim], l_raw)),
            u_raw: params.add(format!("{name}.u"), Tensor::new(vec![dim, dim], u_raw)),
            u_log_diag: params.add(format!("{name}.u_log_diag"), Tensor::vector(u_log_diag)),
            perm: piv,
            sign,
            dim,
        }
    }

    /// The identity mix; useful as a neutral starting point in tests.
    pub fn identity(params: &mut Params, name: &str, dim: usize) -> Self {
        Self::from_matrix(params, name, Tensor::eye(dim).data(), dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn perm_matrix(&self) -> Tensor {
        let d = self.dim;
        let mut p = Tensor::zeros(&[d, d]);
        for (k, &row) in self.perm.iter().enumerate() {
            p.data_mut()[row * d + k] = 1.0;
        }
        p
    }

    /// Assemble W = P L U on the tape.
    fn assemble(&self, cx: &mut Ctx) -> Var {
        let d = self.dim;
        let mut lmask = Tensor::zeros(&[d, d]);
        let mut umask = Tensor::zeros(&[d, d]);
        for r in 0..d {
            for c in 0..d {
                if c < r {
                    lmask.data_mut()[r * d + c] = 1.0;
                } else if c > r {
                    umask.data_mut()[r * d + c] = 1.0;
                }
            }
        }
        let lmask = cx.constant(lmask);
        let umask = cx.constant(umask);
        let eye = cx.constant(Tensor::eye(d));
        let sign = cx.constant(Tensor::vector(self.sign.clone()));
        let p_mat = cx.constant(self.perm_matrix());

        let l_raw = cx.p(self.l_raw);
        let u_raw = cx.p(self.u_raw);
        let u_log_diag = cx.p(self.u_log_diag);

        let l_strict = cx.tape.mul(l_raw, lmask);
        let l = cx.tape.add(l_strict, eye);
        let diag_mag = cx.tape.exp(u_log_diag);
        let diag = cx.tape.mul(diag_mag, sign);
        let diag = cx.tape.diag_embed(diag);
        let u_strict = cx.tape.mul(u_raw, umask);
        let u = cx.tape.add(u_strict, diag);
        let lu = cx.tape.matmul(l, u);
        cx.tape.matmul(p_mat, lu)
    }

    fn logdet_per_frame(&self, cx: &mut Ctx) -> Var {
        let uld = cx.p(self.u_log_diag);
        cx.tape.sum(uld)
    }

    /// Each frame multiplied by W; logdet = T · Σ log|diag U|.
    pub fn forward(&self, cx: &mut Ctx, z: Var) -> (Var, Var) {
        let t_len = cx.tape.value(z).dim(0) as f64;
        let w = self.assemble(cx);
        let wt = cx.tape.transpose(w);
        let out = cx.tape.matmul(z, wt);
        let per = self.logdet_per_frame(cx);
        let logdet = cx.tape.mul_scalar(per, t_len);
        (out, logdet)
    }

    /// Each frame multiplied by W⁻¹ = U⁻¹ L⁻¹ Pᵀ; logdet negated.
    pub fn inverse(&self, cx: &mut Ctx, x: Var) -> (Var, Var) {
        let d = self.dim;
        let t_len = cx.tape.value(x).dim(0) as f64;
        let mut lmask = Tensor::zeros(&[d, d]);
        let mut umask = Tensor::zeros(&[d, d]);
        for r in 0..d {
            for c in 0..d {
                if c < r {
                    lmask.data_mut()[r * d + c] = 1.0;
                } else if c > r {
                    umask.data_mut()[r * d + c] = 1.0;
                }
            }
        }
        let lmask = cx.constant(lmask);
        let umask = cx.constant(umask);
        let eye = cx.constant(Tensor::eye(d));
        let sign = cx.constant(Tensor::vector(self.sign.clone()));
        let p_mat = cx.constant(self.perm_matrix());

        let l_raw = cx.p(self.l_raw);
        let u_raw = cx.p(self.u_raw);
        let u_log_diag = cx.p(self.u_log_diag);

        let l_strict = cx.tape.mul(l_raw, lmask);
        let l = cx.tape.add(l_strict, eye);
        let diag_mag = cx.tape.exp(u_log_diag);
        let diag = cx.tape.mul(diag_mag, sign);
        let diag = cx.tape.diag_embed(diag);
        let u_strict = cx.tape.mul(u_raw, umask);
        let u = cx.tape.add(u_strict, diag);

        let l_inv = cx.tape.mat_inv(l);
        let u_inv = cx.tape.mat_inv(u);
        let p_t = cx.tape.transpose(p_mat);
        let li_pt = cx.tape.matmul(l_inv, p_t);
        let w_inv = cx.tape.matmul(u_inv, li_pt);
        let w_inv_t = cx.tape.transpose(w_inv);
        let out = cx.tape.matmul(x, w_inv_t);
        let per = self.logdet_per_frame(cx);
        let logdet = cx.tape.mul_scalar(per, -t_len);
        (out, logdet)
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian sample.
fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let m = Tensor::randn(&[d, d], 1.0, rng);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for r in 0..d {
            let mut v: Vec<f64> = m.row(r).to_vec();
            for existing in &q {
                let dot: f64 = v.iter().zip(existing).map(|(a, b)| a * b).sum();
                for (vi, ei) in v.iter_mut().zip(existing) {
                    *vi -= dot * ei;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            q.push(v);
        }
        if ok {
            return q.into_iter().flatten().collect();
        }
    }
}

/// Partial-pivot LU: returns (perm, L with unit diagonal, U) such that
/// `W[perm[k], :] = (L U)[k, :]`.
fn lu_decompose(w: &[f64], d: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut a = w.to_vec();
    let mut piv: Vec<usize> = (0..d).collect();
    for col in 0..d {
        let mut best = col;
        for r in col + 1..d {
            if a[r * d + col].abs() > a[best * d + col].abs() {
                best = r;
            }
        }
        assert!(
            a[best * d + col].abs() > 1e-12,
            "channel mix init: singular matrix"
        );
        if best != col {
            piv.swap(col, best);
            for j in 0..d {
                a.swap(col * d + j, best * d + j);
            }
        }
        for r in col + 1..d {
            let f = a[r * d + col] / a[col * d + col];
            a[r * d + col] = f;
            for j in col + 1..d {
                a[r * d + j] -= f * a[col * d + j];
            }
        }
    }
    let mut l = vec![0.0; d * d];
    let mut u = vec![0.0; d * d];
    for r in 0..d {
        l[r * d + r] = 1.0;
        for c in 0..r {
            l[r * d + c] = a[r * d + c];
        }
        for c in r..d {
            u[r * d + c] = a[r * d + c];
        }
    }
    (piv, l, u)
}
