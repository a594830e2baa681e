//! An autoregressive neural HMM transducer whose output distribution is
//! reshaped by an invertible flow post-net, trained by exact maximum
//! likelihood at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`tape`] — a minimal reverse-mode automatic-differentiation
//!   substrate over row-major `f64` tensors.
//! * [`nn`] — parameter store and the small neural building blocks (linear
//!   layers, LSTM cells, embeddings, dropout).
//! * [`nhmm`] — the neural HMM itself: encoder, autoregressive decoder,
//!   log-space forward likelihood, Viterbi alignment and quantile-duration
//!   sampling.
//! * [`flow`] — the invertible post-net: actnorm, LU-parameterised channel
//!   mixing and affine coupling layers with exact log-determinants.
//! * [`model`] — the composed model: change-of-variables likelihood,
//!   training loss, synthesis and alignment.
//! * [`data`] — synthetic symbol-to-trajectory corpora with known ground
//!   truth durations, plus the on-disk container format.
//! * [`train`] — Adam, batching, checkpointing, metrics and the training
//!   loop.
//! * [`check`] — self-contained oracle suites (path enumeration, numerical
//!   Jacobians, finite differences) used by the `verify` command.

pub mod check;
pub mod data;
pub mod flow;
pub mod model;
pub mod nhmm;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
