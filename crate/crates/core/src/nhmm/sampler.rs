//! Synthesis: left-to-right state traversal with temperature-scaled
//! Gaussian sampling and deterministic quantile-based durations.
//!
//! Transition probabilities are consumed only by the quantile rule — they
//! are never Bernoulli-sampled — so durations are a deterministic function
//! of the model outputs and the chosen quantile.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::Ctx;
use crate::tensor::Tensor;

use super::decoder::Decoder;
use super::{EncoderStates, NhmmError};

/// One step of the quantile duration rule.
///
/// `survival_log` is the accumulated `Σ log(1-τ)` over the frames already
/// spent in the current state. The state advances as soon as its implied
/// duration distribution has crossed quantile `q`:
/// `advance ⇔ 1 - exp(survival_log + log(1-τ)) >= q`.
pub fn quantile_transition(survival_log: f64, tau: f64, q: f64) -> (bool, f64) {
    let new_survival = survival_log + (1.0 - tau).ln();
    let advance = 1.0 - new_survival.exp() >= q;
    (advance, new_survival)
}

/// Frames plus the per-state durations that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `[T, D]` source frames (pre-flow).
    pub frames: Tensor,
    /// Frames spent in each of the N states.
    pub durations: Vec<usize>,
}

/// Generate source frames from the neural HMM.
///
/// Starts in state 1; at each frame draws `z_t = μ_t + temperature·σ_t·ε`
/// (temperature 0 emits the mean deterministically and draws nothing);
/// advances states by [`quantile_transition`]; stops after the frame at
/// which the last state's quantile rule fires. Pre-net dropout masks are
/// drawn from the same rng when `prenet_dropout` is set.
pub fn sample<R: Rng>(
    cx: &mut Ctx,
    decoder: &Decoder,
    enc: &EncoderStates,
    temperature: f64,
    quantile: f64,
    prenet_dropout: bool,
    max_frames: usize,
    rng: &mut R,
) -> Result<SampleOutput, NhmmError> {
    assert!(temperature >= 0.0, "temperature must be nonnegative");
    assert!(
        quantile > 0.0 && quantile < 1.0,
        "duration quantile must lie in (0, 1), got {quantile}"
    );
    assert!(
        max_frames >= enc.n,
        "max_frames {} cannot cover {} states",
        max_frames,
        enc.n
    );
    let d = decoder.frame_dim();
    let mut state = decoder.initial_state(cx);
    let mut s = 0usize;
    let mut survival_log = 0.0f64;
    let mut durations = vec![0usize; enc.n];
    let mut frames: Vec<f64> = Vec::new();
    let mut emitted = 0usize;

    loop {
        if emitted == max_frames {
            let partial = SampleOutput {
                frames: Tensor::new(vec![emitted, d], frames),
                durations,
            };
            return Err(NhmmError::MaxFramesExceeded {
                max_frames,
                partial: Box::new(partial),
            });
        }
        let h_s = cx.tape.slice_rows(enc.h, s, s + 1);
        let dropout_rng = if prenet_dropout { Some(&mut *rng) } else { None };
        let (em, next_state) = decoder.step(cx, h_s, &state, dropout_rng);
        let mu = cx.tape.value(em.mu).data().to_vec();
        let sigma = cx.tape.value(em.sigma).data().to_vec();
        let z: Vec<f64> = if temperature == 0.0 {
            mu
        } else {
            mu.iter()
                .zip(&sigma)
                .map(|(m, sg)| m + temperature * sg * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        frames.extend_from_slice(&z);
        durations[s] += 1;
        emitted += 1;

        let tau = cx.tape.value(em.tau).item();
        let (advance, new_survival) = quantile_transition(survival_log, tau, quantile);
        let prev = cx.constant(Tensor::new(vec![1, d], z));
        state = next_state.with_prev(prev);
        if advance {
            if s + 1 == enc.n {
                return Ok(SampleOutput {
                    frames: Tensor::new(vec![emitted, d], frames),
                    durations,
                });
            }
            s += 1;
            survival_log = 0.0;
        } else {
            survival_log = new_survival;
        }
    }
}
