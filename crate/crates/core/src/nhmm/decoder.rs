//! Autoregressive decoder: (θ_t, τ_t) = Dec(h_n, x_{1:t-1}).
//!
//! The previous frame is processed by a two-layer pre-net (with dropout
//! active whenever a dropout rng is supplied) and fed to an LSTM stack whose
//! state carries the long-range memory. The state-defining vector h_n joins
//! at the output heads only, so one shared LSTM pass over a teacher-forced
//! frame sequence serves every state: O(T) LSTM steps plus O(T·N) head
//! evaluations. The decoder never sees h at other indices, preserving the
//! Markov property over the hidden states.

use rand::Rng;

use crate::nn::{dropout_mask, Ctx, Linear, LstmCell, PId, Params};
use crate::tape::Var;
use crate::tensor::Tensor;

use super::EncoderStates;

/// Additive floor on emission standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Transition probabilities are clamped to [TAU_CLAMP, 1-TAU_CLAMP] before
/// any logarithm so the lattice never sees -inf from a saturated gate.
pub const TAU_CLAMP: f64 = 1e-6;

/// Per-timestep, per-state decoder output (μ, σ, τ).
pub struct EmissionStep {
    /// `[1, D]`
    pub mu: Var,
    /// `[1, D]`, strictly positive
    pub sigma: Var,
    /// scalar in (0, 1)
    pub tau: Var,
}

/// Autoregressive state: LSTM hidden/cell per layer plus the previous
/// source frame (the learned go-frame before the first step).
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    /// `[1, D]`
    pub prev: Var,
}

impl DecoderState {
    /// Replace the previous frame after emitting or observing one.
    pub fn with_prev(self, prev: Var) -> Self {
        DecoderState { prev, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    prenet1: Linear,
    prenet2: Linear,
    lstm: Vec<LstmCell>,
    go_frame: PId,
    head_mu: Linear,
    head_sigma: Linear,
    head_tau: Linear,
    frame_dim: usize,
    dropout_rate: f64,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut Params,
        frame_dim: usize,
        state_dim: usize,
        prenet_dim: usize,
        hidden: usize,
        layers: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Self {
        assert!(layers >= 1);
        assert!((0.0..1.0).contains(&dropout_rate));
        let lstm = (0..layers)
            .map(|i| {
                let input = if i == 0 { prenet_dim } else { hidden };
                LstmCell::new(params, &format!("decoder.lstm{i}"), input, hidden, rng)
            })
            .collect();
        Decoder {
            prenet1: Linear::new(params, "decoder.prenet1", frame_dim, prenet_dim, rng),
            prenet2: Linear::new(params, "decoder.prenet2", prenet_dim, prenet_dim, rng),
            lstm,
            go_frame: params.add("decoder.go_frame", Tensor::zeros(&[frame_dim])),
            head_mu: Linear::new(params, "decoder.head_mu", hidden + state_dim, frame_dim, rng),
            head_sigma: Linear::new(
                params,
                "decoder.head_sigma",
                hidden + state_dim,
                frame_dim,
                rng,
            ),
            head_tau: Linear::new(params, "decoder.head_tau", hidden + state_dim, 1, rng),
            frame_dim,
            dropout_rate,
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn head_param_ids(&self) -> [PId; 6] {
        [
            self.head_mu.w,
            self.head_mu.b,
            self.head_sigma.w,
            self.head_sigma.b,
            self.head_tau.w,
            self.head_tau.b,
        ]
    }

    pub fn initial_state(&self, cx: &mut Ctx) -> DecoderState {
        let (h, c): (Vec<_>, Vec<_>) = self.lstm.iter().map(|l| l.zero_state(cx, 1)).unzip();
        let go = cx.p(self.go_frame);
        let prev = cx.tape.reshape(go, vec![1, self.frame_dim]);
        DecoderState { h, c, prev }
    }

    /// Pre-net on the previous frame. A fresh mask is drawn per call when a
    /// dropout rng is supplied (dropout stays on at synthesis when asked).
    fn prenet<R: Rng>(&self, cx: &mut Ctx, x: Var, mut rng: Option<&mut R>) -> Var {
        let mut cur = self.prenet1.apply(cx, x);
        cur = cx.tape.tanh(cur);
        if let Some(r) = rng.as_deref_mut() {
            let mask = dropout_mask(cx.tape.value(cur).shape(), self.dropout_rate, r);
            let mask = cx.constant(mask);
            cur = cx.tape.mul(cur, mask);
        }
        let mut cur = self.prenet2.apply(cx, cur);
        cur = cx.tape.tanh(cur);
        if let Some(r) = rng {
            let mask = dropout_mask(cx.tape.value(cur).shape(), self.dropout_rate, r);
            let mask = cx.constant(mask);
            cur = cx.tape.mul(cur, mask);
        }
        cur
    }

    /// Advance the memory LSTM over one frame; returns the top-layer output
    /// and the new per-layer states.
    fn advance_memory<R: Rng>(
        &self,
        cx: &mut Ctx,
        prev_frame: Var,
        h: &[Var],
        c: &[Var],
        rng: Option<&mut R>,
    ) -> (Var, Vec<Var>, Vec<Var>) {
        let mut input = self.prenet(cx, prev_frame, rng);
        let mut new_h = Vec::with_capacity(self.lstm.len());
        let mut new_c = Vec::with_capacity(self.lstm.len());
        for (i, cell) in self.lstm.iter().enumerate() {
            let (hi, ci) = cell.step(cx, input, h[i], c[i]);
            new_h.push(hi);
            new_c.push(ci);
            input = hi;
        }
        (input, new_h, new_c)
    }

    /// Output heads on `[rows, hidden + state_dim]` inputs: per-row μ, σ
    /// (softplus + floor) and τ (sigmoid, clamped away from {0, 1}).
    fn heads(&self, cx: &mut Ctx, mem_and_state: Var) -> (Var, Var, Var) {
        let rows = cx.tape.value(mem_and_state).dim(0);
        let mu = self.head_mu.apply(cx, mem_and_state);
        let s_raw = self.head_sigma.apply(cx, mem_and_state);
        let sp = cx.tape.softplus(s_raw);
        let sigma = cx.tape.add_scalar(sp, SIGMA_FLOOR);
        let t_raw = self.head_tau.apply(cx, mem_and_state);
        let t_sig = cx.tape.sigmoid(t_raw);
        let tau = cx.tape.clamp(t_sig, TAU_CLAMP, 1.0 - TAU_CLAMP);
        let tau = cx.tape.reshape(tau, vec![rows]);
        (mu, sigma, tau)
    }

    /// One decoder step for a single state vector `h_n: [1, state_dim]`.
    /// The caller sets the next previous frame on the returned state.
    pub fn step<R: Rng>(
        &self,
        cx: &mut Ctx,
        h_n: Var,
        state: &DecoderState,
        dropout_rng: Option<&mut R>,
    ) -> (EmissionStep, DecoderState) {
        let (mem, new_h, new_c) =
            self.advance_memory(cx, state.prev, &state.h, &state.c, dropout_rng);
        let joint = cx.tape.concat_cols(mem, h_n);
        let (mu, sigma, tau) = self.heads(cx, joint);
        let tau = cx.tape.reshape(tau, vec![]);
        (
            EmissionStep { mu, sigma, tau },
            DecoderState {
                h: new_h,
                c: new_c,
                prev: state.prev,
            },
        )
    }

    /// Teacher-forced emission/transition tables for every (t, n): one
    /// shared LSTM pass over the given frames, with h_n varied at the heads.
    pub fn teacher_forced_tables<R: Rng>(
        &self,
        cx: &mut Ctx,
        frames: Var,
        enc: &EncoderStates,
        mut dropout_rng: Option<&mut R>,
    ) -> EmissionTables {
        let t_len = cx.tape.value(frames).dim(0);
        let n = enc.n;
        let mut state = self.initial_state(cx);
        let mut log_e = Vec::with_capacity(t_len);
        let mut log_tau = Vec::with_capacity(t_len);
        let mut log_1mtau = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (mem, new_h, new_c) = self.advance_memory(
                cx,
                state.prev,
                &state.h,
                &state.c,
                dropout_rng.as_deref_mut(),
            );
            let mem_rows = cx.tape.repeat_row(mem, n);
            let joint = cx.tape.concat_cols(mem_rows, enc.h);
            let (mu, sigma, tau) = self.heads(cx, joint);
            let x_t = cx.tape.slice_rows(frames, t, t + 1);
            let x_row = cx.tape.reshape(x_t, vec![self.frame_dim]);
            log_e.push(gaussian_rows_logprob(cx, x_row, mu, sigma));
            let lt = cx.tape.log(tau);
            log_tau.push(lt);
            let neg_tau = cx.tape.neg(tau);
            let one_m = cx.tape.add_scalar(neg_tau, 1.0);
            log_1mtau.push(cx.tape.log(one_m));
            // teacher forcing: the observed frame becomes the next input
            state = DecoderState {
                h: new_h,
                c: new_c,
                prev: x_t,
            };
        }
        EmissionTables {
            log_e,
            log_tau,
            log_1mtau,
        }
    }
}

/// Per-timestep rows of log emission densities and log transition terms,
/// each `[N]` on the tape.
pub struct EmissionTables {
    pub log_e: Vec<Var>,
    pub log_tau: Vec<Var>,
    pub log_1mtau: Vec<Var>,
}

impl EmissionTables {
    pub fn t_len(&self) -> usize {
        self.log_e.len()
    }

    /// Value snapshots as `[T, N]` tensors (for Viterbi and the oracles).
    pub fn values(&self, tape: &crate::tape::Tape) -> (Tensor, Tensor, Tensor) {
        let t_len = self.t_len();
        let n = tape.value(self.log_e[0]).numel();
        let grab = |rows: &[Var]| {
            let mut data = Vec::with_capacity(t_len * n);
            for &r in rows {
                data.extend_from_slice(tape.value(r).data());
            }
            Tensor::new(vec![t_len, n], data)
        };
        (
            grab(&self.log_e),
            grab(&self.log_tau),
            grab(&self.log_1mtau),
        )
    }
}

/// Diagonal-Gaussian log-density rows: x against per-row (μ, σ),
/// `Σ_d [-½ln(2π) - ln σ_d - (x_d-μ_d)²/(2σ_d²)]`.
fn gaussian_rows_logprob(cx: &mut Ctx, x_row: Var, mu: Var, sigma: Var) -> Var {
    let d = cx.tape.value(x_row).numel() as f64;
    let diff = cx.tape.sub(x_row, mu);
    let sq = cx.tape.mul(diff, diff);
    let s2 = cx.tape.mul(sigma, sigma);
    let denom = cx.tape.mul_scalar(s2, 2.0);
    let quad = cx.tape.div(sq, denom);
    let quad = cx.tape.sum_axis(quad, 1);
    let ls = cx.tape.log(sigma);
    let ls = cx.tape.sum_axis(ls, 1);
    let tot = cx.tape.add(quad, ls);
    let tot = cx.tape.add_scalar(tot, 0.5 * d * ln_2pi());
    cx.tape.neg(tot)
}

/// Scalar diagonal-Gaussian log-density; the reference form of the emission
/// model shared with tests and oracles.
pub fn emission_logprob(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    assert!(x.len() == mu.len() && x.len() == sigma.len(), "dimension mismatch");
    let mut acc = 0.0;
    for d in 0..x.len() {
        let z = (x[d] - mu[d]) / sigma[d];
        acc += -0.5 * ln_2pi() - sigma[d].ln() - 0.5 * z * z;
    }
    acc
}

pub(crate) fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}
