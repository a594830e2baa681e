//! Optimiser, batching, checkpointing, metrics and the training loop.
//!
//! Everything mutable is owned here and serialised into checkpoints, so a
//! resumed run replays the uninterrupted one bit for bit: parameters and
//! moments as raw f64 bits, the dropout rng by seed and word position, and
//! the epoch/batch cursor re-derived from the seed.

mod adam;
mod batch;
mod checkpoint;
mod metrics;

pub use adam::{Adam, AdamConfig};
pub use batch::{build_batch, make_batches, Batch};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, MetricsLog, MetricsRecord};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    load_corpus, ContainerError, Corpus, CorpusConfig, DataError, NormStats, Utterance,
};
use crate::flow::FlowError;
use crate::model::{ModelConfig, ModelError, OverflowModel};
use crate::nn::Ctx;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at step {step}; aborting with last good checkpoint retained")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Full training recipe. Serialised verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_updates: u64,
    pub checkpoint_interval: u64,
    pub validate_interval: u64,
    /// Directory containing `train.ofc` / `val.ofc` / `test.ofc`.
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Synthesis-condition defaults carried with the model.
    pub temperature: f64,
    pub quantile: f64,
    pub prenet_dropout_at_synthesis: bool,
    pub max_frames: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            batch_size: 8,
            max_updates: 2000,
            checkpoint_interval: 500,
            validate_interval: 100,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            temperature: 0.667,
            quantile: 0.5,
            prenet_dropout_at_synthesis: true,
            max_frames: 1000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::Config("betas must be < 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.max_updates == 0 {
            return Err(TrainError::Config("max_updates must be >= 1".into()));
        }
        if self.checkpoint_interval == 0 || self.validate_interval == 0 {
            return Err(TrainError::Config("intervals must be >= 1".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(TrainError::Config("quantile must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: self.clip_norm,
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub first_train_nll: f64,
    pub final_train_nll: f64,
}

/// Per-split likelihood summary (dropout disabled).
#[derive(Debug, Clone, Copy)]
pub struct EvalSummary {
    pub sequences: usize,
    pub frames: usize,
    pub per_frame_loglik: f64,
    pub per_frame_nll: f64,
    pub per_seq_loglik: f64,
}

pub fn evaluate(model: &OverflowModel, utterances: &[Utterance]) -> Result<EvalSummary, TrainError> {
    assert!(!utterances.is_empty(), "empty evaluation split");
    let mut total_ll = 0.0;
    let mut total_frames = 0usize;
    for u in utterances {
        let ll = model.loglik::<ChaCha8Rng>(&u.frames, &u.symbols, None)?;
        total_ll += ll;
        total_frames += u.frames.dim(0);
    }
    Ok(EvalSummary {
        sequences: utterances.len(),
        frames: total_frames,
        per_frame_loglik: total_ll / total_frames as f64,
        per_frame_nll: -total_ll / total_frames as f64,
        per_seq_loglik: total_ll / utterances.len() as f64,
    })
}

pub fn normalize_utts(stats: &NormStats, utts: &[Utterance]) -> Vec<Utterance> {
    utts.iter()
        .map(|u| Utterance {
            symbols: u.symbols.clone(),
            frames: stats.apply(&u.frames),
            boundaries: u.boundaries.clone(),
        })
        .collect()
}

pub fn load_split(dir: &Path, name: &str) -> Result<Corpus, TrainError> {
    Ok(load_corpus(&dir.join(format!("{name}.ofc")))?)
}

const DROPOUT_STREAM: u64 = 0xD20;

/// A model plus the sidecar state needed to use it (stats, configs).
pub struct LoadedModel {
    pub model: OverflowModel,
    pub stats: NormStats,
    pub train_config: TrainConfig,
    pub corpus_config: CorpusConfig,
    pub step: u64,
}

/// Rebuild a model from a checkpoint. The arena layout is reconstructed
/// from the config echo, then every value is overwritten bit-for-bit.
pub fn load_model(path: &Path) -> Result<LoadedModel, TrainError> {
    let ck = Checkpoint::load(path)?;
    let mut model = OverflowModel::new(ck.train_config.model.clone(), ck.train_config.seed)?;
    restore_params(&mut model, &ck)?;
    if ck.actnorm_initialized {
        model.flow.mark_actnorm_initialized();
    }
    Ok(LoadedModel {
        model,
        stats: NormStats {
            mean: ck.norm_mean.clone(),
            std: ck.norm_std.clone(),
        },
        train_config: ck.train_config,
        corpus_config: ck.corpus_config,
        step: ck.step,
    })
}

fn restore_params(model: &mut OverflowModel, ck: &Checkpoint) -> Result<(), TrainError> {
    if ck.param_names.len() != model.params.len() {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            ck.param_names.len(),
            model.params.len()
        )));
    }
    for (i, id) in model.params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        if model.params.name(id) != ck.param_names[i] {
            return Err(TrainError::Checkpoint(format!(
                "parameter {} is {} in the checkpoint but {} in the model",
                i,
                ck.param_names[i],
                model.params.name(id)
            )));
        }
        if model.params.get(id).shape() != ck.param_values[i].shape() {
            return Err(TrainError::Checkpoint(format!(
                "parameter {} shape mismatch",
                ck.param_names[i]
            )));
        }
        *model.params.get_mut(id) = ck.param_values[i].clone();
    }
    Ok(())
}

/// Run training to `cfg.max_updates`, optionally resuming from a
/// checkpoint. Deterministic in (config, corpus files, resume point).
pub fn train(cfg: &TrainConfig, resume_from: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_corpus = load_split(&cfg.corpus_dir, "train")?;
    let val_corpus = load_split(&cfg.corpus_dir, "val")?;
    let corpus_config = train_corpus.config.clone();
    if cfg.model.vocab != corpus_config.vocab {
        return Err(TrainError::Config(format!(
            "model vocab {} does not match corpus vocab {}",
            cfg.model.vocab, corpus_config.vocab
        )));
    }
    if cfg.model.frame_dim != corpus_config.frame_dim {
        return Err(TrainError::Config(format!(
            "model frame_dim {} does not match corpus frame_dim {}",
            cfg.model.frame_dim, corpus_config.frame_dim
        )));
    }
    for (split_name, corpus) in [("train", &train_corpus), ("val", &val_corpus)] {
        for (i, u) in corpus.utterances.iter().enumerate() {
            let n = cfg.model.states_per_symbol * u.symbols.len();
            if u.frames.dim(0) < n {
                return Err(TrainError::Config(format!(
                    "{split_name} utterance {i} has {} frames for {} states; \
                     regenerate the corpus with min_duration >= {}",
                    u.frames.dim(0),
                    n,
                    cfg.model.states_per_symbol
                )));
            }
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");

    let mut model;
    let mut adam;
    let stats;
    let mut dropout_rng;
    let mut step: u64;
    let mut epoch: u64;
    let mut batch_pos: usize;
    let mut log;

    match resume_from {
        Some(ckpt_path) => {
            let ck = Checkpoint::load(ckpt_path)?;
            if ck.train_config.model != cfg.model {
                return Err(TrainError::Config(
                    "cannot resume: model config differs from the checkpoint".into(),
                ));
            }
            if ck.train_config.seed != cfg.seed {
                return Err(TrainError::Config(
                    "cannot resume: seed differs from the checkpoint".into(),
                ));
            }
            model = OverflowModel::new(cfg.model.clone(), cfg.seed)?;
            restore_params(&mut model, &ck)?;
            if ck.actnorm_initialized {
                model.flow.mark_actnorm_initialized();
            }
            adam = Adam::new(cfg.adam(), &model.params);
            adam.step = ck.adam_step;
            adam.m = ck.adam_m.clone();
            adam.v = ck.adam_v.clone();
            stats = NormStats {
                mean: ck.norm_mean.clone(),
                std: ck.norm_std.clone(),
            };
            dropout_rng = ChaCha8Rng::from_seed(ck.dropout_seed);
            dropout_rng.set_word_pos(ck.dropout_word_pos);
            step = ck.step;
            epoch = ck.epoch;
            batch_pos = ck.batch_pos as usize;
            log = MetricsLog::append(&metrics_path)?;
        }
        None => {
            model = OverflowModel::new(cfg.model.clone(), cfg.seed)?;
            adam = Adam::new(cfg.adam(), &model.params);
            stats = NormStats::fit(&train_corpus.utterances);
            dropout_rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(
                cfg.seed,
                DROPOUT_STREAM,
                0,
            ));
            step = 0;
            epoch = 0;
            batch_pos = 0;
            log = MetricsLog::create(&metrics_path)?;
        }
    }

    let train_utts = normalize_utts(&stats, &train_corpus.utterances);
    let val_utts = normalize_utts(&stats, &val_corpus.utterances);
    let lengths: Vec<usize> = train_utts.iter().map(|u| u.frames.dim(0)).collect();

    // data-dependent actnorm init on the first batch of a fresh run
    if resume_from.is_none() && !model.flow.actnorm_ready() {
        let first = make_batches(&lengths, cfg.batch_size, cfg.seed, 0);
        let frames: Vec<_> = first[0].iter().map(|&i| train_utts[i].frames.clone()).collect();
        model.actnorm_init(&frames)?;
    }

    let mut batches = make_batches(&lengths, cfg.batch_size, cfg.seed, epoch);
    let mut first_train_nll = None;
    let mut final_train_nll = f64::NAN;
    let mut last_ckpt = cfg.out_dir.join(format!("ckpt-{step}.ofck"));

    let make_checkpoint =
        |model: &OverflowModel, adam: &Adam, rng: &ChaCha8Rng, step, epoch, batch_pos| Checkpoint {
            step,
            train_config: cfg.clone(),
            corpus_config: corpus_config.clone(),
            param_names: model
                .params
                .iter()
                .map(|(name, _)| name.to_string())
                .collect(),
            param_values: model.params.iter().map(|(_, t)| t.clone()).collect(),
            adam_step: adam.step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            norm_mean: stats.mean.clone(),
            norm_std: stats.std.clone(),
            dropout_seed: rng.get_seed(),
            dropout_word_pos: rng.get_word_pos(),
            epoch,
            batch_pos,
            actnorm_initialized: model.flow.actnorm_ready(),
        };

    while step < cfg.max_updates {
        if batch_pos >= batches.len() {
            epoch += 1;
            batch_pos = 0;
            batches = make_batches(&lengths, cfg.batch_size, cfg.seed, epoch);
        }
        let idx = &batches[batch_pos];
        let pairs: Vec<_> = idx
            .iter()
            .map(|&i| (&train_utts[i].frames, &train_utts[i].symbols))
            .collect();

        let (loss_val, grad_norm) = {
            let mut cx = Ctx::new(&model.params);
            let loss = model.nll_var(&mut cx, &pairs, Some(&mut dropout_rng))?;
            let loss_val = cx.tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: step + 1 });
            }
            cx.tape.backward(loss);
            let grads = cx.all_grads();
            drop(cx);
            let norm = adam.apply(&mut model.params, &grads)?;
            (loss_val, norm)
        };
        step += 1;
        batch_pos += 1;
        first_train_nll.get_or_insert(loss_val);
        final_train_nll = loss_val;

        let mut record = MetricsRecord {
            step,
            train_nll_frame: loss_val,
            grad_norm,
            val_nll_frame: None,
            val_loglik_seq: None,
        };
        // validation strictly on the interval: the log must not depend on
        // where a run segment happens to stop
        if step % cfg.validate_interval == 0 {
            let summary = evaluate(&model, &val_utts)?;
            record.val_nll_frame = Some(summary.per_frame_nll);
            record.val_loglik_seq = Some(summary.per_seq_loglik);
        }
        log.write(&record)?;

        if step % cfg.checkpoint_interval == 0 || step == cfg.max_updates {
            let ck = make_checkpoint(&model, &adam, &dropout_rng, step, epoch, batch_pos as u64);
            last_ckpt = cfg.out_dir.join(format!("ckpt-{step}.ofck"));
            ck.save(&last_ckpt)?;
        }
    }

    Ok(TrainOutcome {
        final_step: step,
        checkpoint_path: last_ckpt,
        metrics_path,
        first_train_nll: first_train_nll.unwrap_or(f64::NAN),
        final_train_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, save_corpus, NoiseFamily};
    use crate::flow::FlowConfig;

    fn tiny_setup(dir: &Path, max_updates: u64) -> TrainConfig {
        let corpus_cfg = CorpusConfig {
            vocab: 3,
            frame_dim: 2,
            train_size: 10,
            val_size: 4,
            test_size: 4,
            symbols_range: (2, 4),
            noise: NoiseFamily::Bimodal,
            seed: 77,
            ..CorpusConfig::default()
        };
        let set = generate_corpus(&corpus_cfg).unwrap();
        let corpus_dir = dir.join("corpus");
        std::fs::create_dir_all(&corpus_dir).unwrap();
        save_corpus(&set.train, &corpus_dir.join("train.ofc")).unwrap();
        save_corpus(&set.val, &corpus_dir.join("val.ofc")).unwrap();
        save_corpus(&set.test, &corpus_dir.join("test.ofc")).unwrap();
        TrainConfig {
            seed: 5,
            batch_size: 4,
            max_updates,
            checkpoint_interval: 5,
            validate_interval: 5,
            corpus_dir,
            out_dir: dir.join("run"),
            model: ModelConfig {
                vocab: 3,
                frame_dim: 2,
                embed_dim: 6,
                encoder_hidden: 6,
                state_dim: 6,
                states_per_symbol: 2,
                prenet_dim: 6,
                prenet_dropout: 0.5,
                decoder_hidden: 8,
                decoder_layers: 1,
                identity_flow: false,
                flow: FlowConfig {
                    depth: 1,
                    hidden: 6,
                    conv_layers: 2,
                    kernel: 3,
                    dilation: 1,
                },
                temperature_scales_variance: false,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_training_reduces_the_loss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_setup(dir.path(), 40);
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.final_step, 40);
        assert!(
            out.final_train_nll < out.first_train_nll,
            "nll {} -> {}",
            out.first_train_nll,
            out.final_train_nll
        );
        assert!(out.checkpoint_path.exists());
        let recs = read_metrics(&out.metrics_path).unwrap();
        assert_eq!(recs.len(), 40);
        assert!(recs.iter().any(|r| r.val_nll_frame.is_some()));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_metrics_log() {
        let dir_a = tempfile::tempdir().unwrap();
        let cfg_a = tiny_setup(dir_a.path(), 16);
        let out_a = train(&cfg_a, None).unwrap();
        let log_a = std::fs::read(&out_a.metrics_path).unwrap();

        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_b = tiny_setup(dir_b.path(), 8);
        let out_b1 = train(&cfg_b, None).unwrap();
        cfg_b.max_updates = 16;
        let out_b2 = train(&cfg_b, Some(&out_b1.checkpoint_path)).unwrap();
        let log_b = std::fs::read(&out_b2.metrics_path).unwrap();
        assert_eq!(log_a, log_b, "metrics logs must be bitwise identical");

        // and the final parameters match bit for bit
        let a = load_model(&out_a.checkpoint_path).unwrap();
        let b = load_model(&out_b2.checkpoint_path).unwrap();
        for (ia, ib) in a.model.params.ids().zip(b.model.params.ids()) {
            let (ta, tb) = (a.model.params.get(ia), b.model.params.get(ib));
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn exploding_learning_rate_aborts_and_keeps_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_setup(dir.path(), 50);
        cfg.learning_rate = 1e9;
        cfg.clip_norm = 0.0;
        cfg.checkpoint_interval = 1;
        let err = train(&cfg, None).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step } => {
                // a checkpoint from before the failure survives
                let prev = cfg.out_dir.join(format!("ckpt-{}.ofck", step - 1));
                assert!(prev.exists(), "missing {prev:?}");
            }
            TrainError::NonFiniteGradient { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mismatched_model_and_corpus_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_setup(dir.path(), 5);
        cfg.model.vocab = 99;
        assert!(matches!(train(&cfg, None), Err(TrainError::Config(_))));
    }

    #[test]
    fn padded_batch_loss_equals_sum_of_singleton_losses() {
        // the padded tensor plus mask reconstructs each sequence exactly,
        // so total nll over a batch equals the sum over singletons
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_setup(dir.path(), 5);
        let corpus = load_split(&cfg.corpus_dir, "train").unwrap();
        let stats = NormStats::fit(&corpus.utterances);
        let utts = normalize_utts(&stats, &corpus.utterances);
        let model = OverflowModel::new(cfg.model.clone(), 3).unwrap();

        let batch = build_batch(&[0, 3, 5], &utts);
        let mut total_batched = 0.0;
        for (row, &i) in batch.indices.iter().enumerate() {
            let frames = batch.unpadded_frames(row);
            assert_eq!(frames, utts[i].frames);
            total_batched += model
                .loglik::<ChaCha8Rng>(&frames, &utts[i].symbols, None)
                .unwrap();
        }
        let mut total_single = 0.0;
        for &i in &batch.indices {
            total_single += model
                .loglik::<ChaCha8Rng>(&utts[i].frames, &utts[i].symbols, None)
                .unwrap();
        }
        assert_eq!(total_batched.to_bits(), total_single.to_bits());
    }
}
