//! The composed model: a neural HMM source distribution over Z pushed
//! through the invertible post-net f: Z -> X.
//!
//! Training evaluates `ln p_X(x) = ln p_Z(f⁻¹(x)) + ln|det J_{f⁻¹}(x)|`
//! end-to-end on one tape; synthesis samples Z from the HMM and maps it
//! forward through the flow. With `identity_flow` the stack is empty and
//! the model reduces exactly to the plain neural HMM.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowConfig, FlowError, FlowStack};
use crate::nhmm::{
    self, AlignmentPath, Decoder, Encoder, LogAlphaLattice, NhmmError, SymbolSequence,
};
use crate::nn::{Ctx, Params};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nhmm(#[from] NhmmError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("frame dimension {got} does not match the model's {expected}")]
    FrameDim { got: usize, expected: usize },
}

/// Architecture hyperparameters. Serialised verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub frame_dim: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub state_dim: usize,
    pub states_per_symbol: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    /// Ablation: empty post-net, reducing the model to the plain neural HMM.
    pub identity_flow: bool,
    pub flow: FlowConfig,
    /// When set, `temperature` is read as the variance of Z rather than a
    /// factor on its standard deviation (the default scales sigma).
    pub temperature_scales_variance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 5,
            frame_dim: 4,
            embed_dim: 24,
            encoder_hidden: 24,
            state_dim: 24,
            states_per_symbol: 2,
            prenet_dim: 24,
            prenet_dropout: 0.5,
            decoder_hidden: 48,
            decoder_layers: 1,
            identity_flow: false,
            flow: FlowConfig::default(),
            temperature_scales_variance: false,
        }
    }
}

/// Synthesis output in X space, with the state durations that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub frames: Tensor,
    pub state_durations: Vec<usize>,
    pub symbol_durations: Vec<usize>,
}

pub struct OverflowModel {
    pub params: Params,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub flow: FlowStack,
    pub config: ModelConfig,
}

impl OverflowModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(
            &mut params,
            config.vocab,
            config.embed_dim,
            config.encoder_hidden,
            config.state_dim,
            config.states_per_symbol,
            &mut rng,
        );
        let decoder = Decoder::new(
            &mut params,
            config.frame_dim,
            config.state_dim,
            config.prenet_dim,
            config.decoder_hidden,
            config.decoder_layers,
            config.prenet_dropout,
            &mut rng,
        );
        let flow = if config.identity_flow {
            FlowStack::identity()
        } else {
            FlowStack::new(&mut params, config.frame_dim, &config.flow, &mut rng)?
        };
        Ok(OverflowModel {
            params,
            encoder,
            decoder,
            flow,
            config,
        })
    }

    fn check_frames(&self, frames: &Tensor) -> Result<(), ModelError> {
        if frames.rank() != 2 || frames.dim(1) != self.config.frame_dim {
            return Err(ModelError::FrameDim {
                got: if frames.rank() == 2 { frames.dim(1) } else { 0 },
                expected: self.config.frame_dim,
            });
        }
        Ok(())
    }

    /// Tape-level log-likelihood: `ln p_Z(f⁻¹(x)) + ln|det J_{f⁻¹}(x)|`,
    /// differentiable w.r.t. every parameter.
    pub fn loglik_var<R: Rng>(
        &self,
        cx: &mut Ctx,
        frames: &Tensor,
        seq: &SymbolSequence,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Var, LogAlphaLattice), ModelError> {
        self.check_frames(frames)?;
        let x = cx.constant(frames.clone());
        let (z, logdet) = self.flow.inverse(cx, x);
        let enc = self.encoder.encode(cx, seq)?;
        let (base, lattice) = nhmm::forward_loglik(cx, &self.decoder, z, &enc, dropout_rng)?;
        let total = cx.tape.add(base, logdet);
        Ok((total, lattice))
    }

    /// Value-level log-likelihood (no gradients).
    pub fn loglik<R: Rng>(
        &self,
        frames: &Tensor,
        seq: &SymbolSequence,
        dropout_rng: Option<&mut R>,
    ) -> Result<f64, ModelError> {
        let mut cx = Ctx::new(&self.params);
        let (ll, _) = self.loglik_var(&mut cx, frames, seq, dropout_rng)?;
        Ok(cx.tape.value(ll).item())
    }

    /// Batch training loss: mean negative log-likelihood normalised per
    /// frame, `-Σ_b loglik_b / Σ_b T_b`.
    pub fn nll_var<R: Rng>(
        &self,
        cx: &mut Ctx,
        batch: &[(&Tensor, &SymbolSequence)],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var, ModelError> {
        assert!(!batch.is_empty(), "empty batch");
        let mut total: Option<Var> = None;
        let mut total_frames = 0usize;
        for (frames, seq) in batch {
            let (ll, _) = self.loglik_var(cx, frames, seq, dropout_rng.as_deref_mut())?;
            total_frames += frames.dim(0);
            total = Some(match total {
                None => ll,
                Some(acc) => cx.tape.add(acc, ll),
            });
        }
        let total = total.expect("nonempty batch");
        Ok(cx.tape.mul_scalar(total, -1.0 / total_frames as f64))
    }

    /// Value-level batch loss.
    pub fn nll<R: Rng>(
        &self,
        batch: &[(&Tensor, &SymbolSequence)],
        dropout_rng: Option<&mut R>,
    ) -> Result<f64, ModelError> {
        let mut cx = Ctx::new(&self.params);
        let v = self.nll_var(&mut cx, batch, dropout_rng)?;
        Ok(cx.tape.value(v).item())
    }

    /// Draw output frames for a symbol sequence: sample Z autoregressively
    /// with quantile-based durations, then push through the flow.
    pub fn synthesize<R: Rng>(
        &self,
        seq: &SymbolSequence,
        temperature: f64,
        quantile: f64,
        prenet_dropout: bool,
        max_frames: usize,
        rng: &mut R,
    ) -> Result<SynthOutput, ModelError> {
        let sigma_scale = if self.config.temperature_scales_variance {
            temperature.sqrt()
        } else {
            temperature
        };
        let mut cx = Ctx::new(&self.params);
        let enc = self.encoder.encode(&mut cx, seq)?;
        let z = nhmm::sample(
            &mut cx,
            &self.decoder,
            &enc,
            sigma_scale,
            quantile,
            prenet_dropout,
            max_frames,
            rng,
        )?;
        let zv = cx.constant(z.frames.clone());
        let (x, _) = self.flow.forward(&mut cx, zv);
        Ok(SynthOutput {
            frames: cx.tape.value(x).clone(),
            symbol_durations: z
                .durations
                .chunks(self.config.states_per_symbol)
                .map(|c| c.iter().sum())
                .collect(),
            state_durations: z.durations,
        })
    }

    /// Viterbi alignment of observed frames: pulls them back through the
    /// flow and decodes the best monotone state path.
    pub fn align(
        &self,
        frames: &Tensor,
        seq: &SymbolSequence,
    ) -> Result<(AlignmentPath, f64), ModelError> {
        self.check_frames(frames)?;
        let mut cx = Ctx::new(&self.params);
        let x = cx.constant(frames.clone());
        let (z, _) = self.flow.inverse(&mut cx, x);
        let enc = self.encoder.encode(&mut cx, seq)?;
        Ok(nhmm::viterbi(&mut cx, &self.decoder, z, &enc)?)
    }

    /// Data-dependent actnorm initialisation on the first training batch.
    pub fn actnorm_init(&mut self, batch: &[Tensor]) -> Result<(), FlowError> {
        self.flow.actnorm_init(&mut self.params, batch)
    }
}
