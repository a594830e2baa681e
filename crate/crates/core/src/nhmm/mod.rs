//! The neural HMM transducer: an encoder that turns an input symbol
//! sequence into state-defining vectors for a left-to-right no-skip HMM,
//! and an autoregressive decoder that emits per-state Gaussian parameters
//! and transition probabilities at every frame.
//!
//! Training computes the exact sequence likelihood with the log-space
//! forward algorithm; alignment uses Viterbi; synthesis advances states
//! deterministically with quantile-based duration generation.

mod decoder;
mod encoder;
mod lattice;
mod sampler;

pub use decoder::{
    emission_logprob, Decoder, DecoderState, EmissionStep, EmissionTables, SIGMA_FLOOR, TAU_CLAMP,
};
pub use encoder::Encoder;
pub use lattice::{forward_from_tables, viterbi_from_tables, LogAlphaLattice};
pub use sampler::{quantile_transition, sample, SampleOutput};

use rand::Rng;
use thiserror::Error;

use crate::nn::Ctx;
use crate::tape::Var;

#[derive(Debug, Error)]
pub enum NhmmError {
    #[error("no monotone alignment exists: {frames} frames for {states} states")]
    NoMonotonePath { frames: usize, states: usize },
    #[error("symbol index {index} out of range for vocabulary of {vocab}")]
    SymbolOutOfRange { index: usize, vocab: usize },
    #[error("sampling exhausted {max_frames} frames before the last state terminated")]
    MaxFramesExceeded {
        max_frames: usize,
        partial: Box<SampleOutput>,
    },
}

/// Input symbol indices. Never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    symbols: Vec<usize>,
}

impl SymbolSequence {
    pub fn new(symbols: Vec<usize>) -> Self {
        assert!(!symbols.is_empty(), "symbol sequence must be nonempty");
        SymbolSequence { symbols }
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The state-defining vectors h_{1:N} of the HMM, `N = states_per_symbol * M`.
/// Fixed before decoding begins; the decoder sees exactly one row per step.
#[derive(Debug, Clone, Copy)]
pub struct EncoderStates {
    /// `[N, state_dim]` on the tape.
    pub h: Var,
    pub n: usize,
    pub states_per_symbol: usize,
}

/// A monotone state path, 0-based: starts at state 0, moves by {0, +1} per
/// frame and ends in the last state (termination happens after the final
/// frame). Invariants are asserted at construction, i.e. on every decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    states: Vec<usize>,
    n_states: usize,
}

impl AlignmentPath {
    pub fn new(states: Vec<usize>, n_states: usize) -> Self {
        assert!(!states.is_empty(), "alignment path must be nonempty");
        assert_eq!(states[0], 0, "alignment must start in the first state");
        for w in states.windows(2) {
            let step = w[1] as isize - w[0] as isize;
            assert!(
                step == 0 || step == 1,
                "alignment must stay or advance by one (got step {step})"
            );
        }
        assert_eq!(
            *states.last().unwrap(),
            n_states - 1,
            "alignment must end in the last state"
        );
        AlignmentPath { states, n_states }
    }

    /// 0-based state index per frame.
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frames spent in each state.
    pub fn state_durations(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.n_states];
        for &s in &self.states {
            out[s] += 1;
        }
        out
    }

    /// Frames spent on each symbol, folding `states_per_symbol` states
    /// together.
    pub fn symbol_durations(&self, states_per_symbol: usize) -> Vec<usize> {
        let d = self.state_durations();
        d.chunks(states_per_symbol).map(|c| c.iter().sum()).collect()
    }
}

/// Exact log-likelihood of `frames` under the neural HMM by the log-space
/// forward algorithm. Teacher-forces the autoregressive state on the given
/// frames; `dropout_rng` enables pre-net dropout (training mode).
pub fn forward_loglik<R: Rng>(
    cx: &mut Ctx,
    decoder: &Decoder,
    frames: Var,
    enc: &EncoderStates,
    dropout_rng: Option<&mut R>,
) -> Result<(Var, LogAlphaLattice), NhmmError> {
    let t_len = cx.tape.value(frames).dim(0);
    if t_len < enc.n {
        return Err(NhmmError::NoMonotonePath {
            frames: t_len,
            states: enc.n,
        });
    }
    let tables = decoder.teacher_forced_tables(cx, frames, enc, dropout_rng);
    Ok(forward_from_tables(cx, &tables, enc.n))
}

/// Single best monotone alignment and its log joint probability (including
/// the terminal transition). Dropout is always disabled here.
pub fn viterbi(
    cx: &mut Ctx,
    decoder: &Decoder,
    frames: Var,
    enc: &EncoderStates,
) -> Result<(AlignmentPath, f64), NhmmError> {
    let t_len = cx.tape.value(frames).dim(0);
    if t_len < enc.n {
        return Err(NhmmError::NoMonotonePath {
            frames: t_len,
            states: enc.n,
        });
    }
    let tables = decoder.teacher_forced_tables::<rand_chacha::ChaCha8Rng>(cx, frames, enc, None);
    let (log_e, log_tau, log_1mtau) = tables.values(&cx.tape);
    Ok(viterbi_from_tables(&log_e, &log_tau, &log_1mtau))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_invariants_hold() {
        let p = AlignmentPath::new(vec![0, 0, 1, 2, 2], 3);
        assert_eq!(p.state_durations(), vec![2, 1, 2]);
        assert_eq!(p.symbol_durations(2), vec![3, 2]);
    }

    #[test]
    #[should_panic(expected = "must start in the first state")]
    fn alignment_must_start_at_zero() {
        AlignmentPath::new(vec![1, 2], 3);
    }

    #[test]
    #[should_panic(expected = "stay or advance by one")]
    fn alignment_rejects_skips() {
        AlignmentPath::new(vec![0, 2], 3);
    }

    #[test]
    #[should_panic(expected = "end in the last state")]
    fn alignment_must_terminate() {
        AlignmentPath::new(vec![0, 1], 3);
    }
}
