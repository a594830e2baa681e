//! Synthetic symbol-to-trajectory corpora with known ground-truth durations
//! and deliberately non-Gaussian frame noise, standing in for real acoustic
//! features at desk scale.
//!
//! Generation is a pure function of [`CorpusConfig`] (including its seed):
//! every utterance draws from an rng derived from (seed, split, index), so
//! output is identical regardless of generation order or thread count.

mod container;

pub use container::{load_corpus, save_corpus, ContainerError, FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nhmm::SymbolSequence;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Bimodal,
    Skewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Everything that determines a corpus. The seed fixes targets, durations,
/// symbol draws and noise; byte-identical corpora come from equal configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab: usize,
    pub frame_dim: usize,
    /// Per-symbol mean durations are drawn uniformly from this range.
    pub duration_mean_range: (f64, f64),
    /// Hard floor on segment durations. Models with `states_per_symbol`
    /// states need every utterance to satisfy T >= states_per_symbol * M,
    /// which this floor guarantees whenever it is >= states_per_symbol.
    #[serde(default = "default_min_duration")]
    pub min_duration: usize,
    /// Degenerate mode: every segment lasts exactly this many frames.
    #[serde(default)]
    pub fixed_duration: Option<usize>,
    /// Per-symbol target vectors; derived from the seed when absent.
    #[serde(default)]
    pub targets: Option<Vec<Vec<f64>>>,
    pub target_scale: f64,
    pub noise: NoiseFamily,
    pub noise_std: f64,
    pub bimodal_offset: f64,
    pub skew_sigma: f64,
    pub drift_amp: f64,
    /// Symbols per utterance, inclusive range.
    pub symbols_range: (usize, usize),
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab: 5,
            frame_dim: 4,
            duration_mean_range: (3.0, 6.0),
            min_duration: 2,
            fixed_duration: None,
            targets: None,
            target_scale: 1.5,
            noise: NoiseFamily::Bimodal,
            noise_std: 0.25,
            bimodal_offset: 0.6,
            skew_sigma: 0.8,
            drift_amp: 0.2,
            symbols_range: (3, 7),
            train_size: 500,
            val_size: 60,
            test_size: 60,
            seed: 1234,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.vocab == 0 {
            return Err(DataError::InvalidConfig("vocabulary must be nonempty".into()));
        }
        if self.frame_dim == 0 {
            return Err(DataError::InvalidConfig("frame_dim must be positive".into()));
        }
        let (lo, hi) = self.duration_mean_range;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(DataError::InvalidConfig(format!(
                "duration mean range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
            )));
        }
        if self.min_duration == 0 {
            return Err(DataError::InvalidConfig("min_duration must be >= 1".into()));
        }
        if lo < self.min_duration as f64 {
            return Err(DataError::InvalidConfig(format!(
                "duration mean range low end {lo} is below min_duration {}",
                self.min_duration
            )));
        }
        if let Some(d) = self.fixed_duration {
            if d == 0 {
                return Err(DataError::InvalidConfig("fixed duration must be >= 1".into()));
            }
        }
        let (slo, shi) = self.symbols_range;
        if !(slo >= 1 && shi >= slo) {
            return Err(DataError::InvalidConfig(format!(
                "symbols range [{slo}, {shi}] must satisfy 1 <= lo <= hi"
            )));
        }
        if let Some(t) = &self.targets {
            if t.len() != self.vocab || t.iter().any(|v| v.len() != self.frame_dim) {
                return Err(DataError::InvalidConfig(
                    "targets must be vocab x frame_dim".into(),
                ));
            }
        }
        if self.train_size == 0 {
            return Err(DataError::InvalidConfig("train split must be nonempty".into()));
        }
        Ok(())
    }

    /// Per-symbol target vectors, either explicit or seed-derived.
    pub fn symbol_targets(&self) -> Vec<Vec<f64>> {
        if let Some(t) = &self.targets {
            return t.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xA11CE, 0));
        (0..self.vocab)
            .map(|_| {
                (0..self.frame_dim)
                    .map(|_| self.target_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    /// Per-symbol mean durations, seed-derived.
    pub fn symbol_mean_durations(&self) -> Vec<f64> {
        let (lo, hi) = self.duration_mean_range;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xD0_0D, 0));
        (0..self.vocab).map(|_| rng.gen_range(lo..=hi)).collect()
    }
}

/// One generated sequence with its ground-truth segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub symbols: SymbolSequence,
    /// `[T, D]`
    pub frames: Tensor,
    /// Per-symbol `(start, len)` spans, 0-based, partitioning `[0, T)`.
    pub boundaries: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone)]
pub struct CorpusSet {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

fn default_min_duration() -> usize {
    2
}

/// Stable seed derivation (FNV-1a over the components).
pub(crate) fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in master
        .to_le_bytes()
        .into_iter()
        .chain(stream.to_le_bytes())
        .chain(index.to_le_bytes())
    {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn sample_geometric<R: Rng>(mean: f64, rng: &mut R) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.gen::<f64>();
    let d = 1.0 + ((1.0 - u).ln() / (1.0 - p).ln()).floor();
    d as usize
}

fn generate_utterance(cfg: &CorpusConfig, split: Split, index: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split.tag() as u64 + 1, index));
    let targets = cfg.symbol_targets();
    let mean_durs = cfg.symbol_mean_durations();
    let d = cfg.frame_dim;

    let (slo, shi) = cfg.symbols_range;
    let m = rng.gen_range(slo..=shi);
    let symbols: Vec<usize> = (0..m).map(|_| rng.gen_range(0..cfg.vocab)).collect();

    let mut frames: Vec<f64> = Vec::new();
    let mut boundaries = Vec::with_capacity(m);
    let mut t = 0usize;
    for &sym in &symbols {
        let dur = match cfg.fixed_duration {
            Some(fd) => fd,
            None => {
                // duration = (floor - 1) + geometric with the residual mean,
                // so the configured mean is hit exactly despite the floor
                let mean = mean_durs[sym];
                let floor = cfg.min_duration;
                let residual_mean = mean - (floor - 1) as f64;
                let cap = (4.0 * mean).ceil() as usize;
                ((floor - 1) + sample_geometric(residual_mean, &mut rng)).clamp(floor, cap.max(floor))
            }
        };
        let drift_dir: Vec<f64> = (0..d)
            .map(|_| cfg.drift_amp * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..dur {
            let ramp = if dur > 1 {
                2.0 * j as f64 / (dur - 1) as f64 - 1.0
            } else {
                0.0
            };
            let noise = draw_noise(cfg, &mut rng);
            for c in 0..d {
                frames.push(targets[sym][c] + ramp * drift_dir[c] + noise[c]);
            }
        }
        boundaries.push((t, dur));
        t += dur;
    }
    Utterance {
        symbols: SymbolSequence::new(symbols),
        frames: Tensor::new(vec![t, d], frames),
        boundaries,
    }
}

fn draw_noise<R: Rng>(cfg: &CorpusConfig, rng: &mut R) -> Vec<f64> {
    let d = cfg.frame_dim;
    match cfg.noise {
        NoiseFamily::Gaussian => (0..d)
            .map(|_| cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        NoiseFamily::Bimodal => {
            // one branch per frame: all channels shift together, giving
            // cross-channel structure no diagonal Gaussian can express
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (0..d)
                .map(|_| {
                    sign * cfg.bimodal_offset + cfg.noise_std * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        }
        NoiseFamily::Skewed => {
            // centred exponentiated Gaussian
            let shift = (cfg.skew_sigma * cfg.skew_sigma / 2.0).exp();
            (0..d)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    cfg.noise_std * ((cfg.skew_sigma * g).exp() - shift)
                })
                .collect()
        }
    }
}

/// Generate train/val/test splits. Pure in the config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<CorpusSet, DataError> {
    cfg.validate()?;
    let build = |split: Split, size: usize| Corpus {
        config: cfg.clone(),
        split,
        utterances: (0..size as u64)
            .map(|i| generate_utterance(cfg, split, i))
            .collect(),
    };
    Ok(CorpusSet {
        train: build(Split::Train, cfg.train_size),
        val: build(Split::Val, cfg.val_size),
        test: build(Split::Test, cfg.test_size),
    })
}

/// Per-channel z-scoring statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const NORM_STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn fit(utterances: &[Utterance]) -> Self {
        assert!(!utterances.is_empty(), "cannot fit stats on an empty split");
        let d = utterances[0].frames.dim(1);
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for u in utterances {
            for t in 0..u.frames.dim(0) {
                for c in 0..d {
                    mean[c] += u.frames.at2(t, c);
                }
                count += 1;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0; d];
        for u in utterances {
            for t in 0..u.frames.dim(0) {
                for c in 0..d {
                    let diff = u.frames.at2(t, c) - mean[c];
                    var[c] += diff * diff;
                }
            }
        }
        let std: Vec<f64> = var
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let s = (v / count as f64).sqrt();
                if s < NORM_STD_FLOOR {
                    log::warn!(
                        "channel {c} has near-zero variance; flooring std at {NORM_STD_FLOOR}"
                    );
                    NORM_STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn apply(&self, frames: &Tensor) -> Tensor {
        let d = self.mean.len();
        assert_eq!(frames.dim(1), d);
        let data = frames
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(frames.shape().to_vec(), data)
    }

    pub fn invert(&self, frames: &Tensor) -> Tensor {
        let d = self.mean.len();
        assert_eq!(frames.dim(1), d);
        let data = frames
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::new(frames.shape().to_vec(), data)
    }
}

/// Sample skewness and excess kurtosis; the normality probes used to confirm
/// that the non-Gaussian noise families actually are non-Gaussian.
pub fn skewness_excess_kurtosis(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = samples.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            vocab: 3,
            frame_dim: 2,
            train_size: 10,
            val_size: 4,
            test_size: 4,
            symbols_range: (2, 4),
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn same_config_same_corpus() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.train.utterances, b.train.utterances);
        assert_eq!(a.val.utterances, b.val.utterances);
        assert_eq!(a.test.utterances, b.test.utterances);
    }

    #[test]
    fn different_seed_different_corpus() {
        let cfg = small_cfg();
        let cfg2 = CorpusConfig {
            seed: cfg.seed + 1,
            ..cfg.clone()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg2).unwrap();
        assert_ne!(a.train.utterances, b.train.utterances);
    }

    #[test]
    fn fixed_duration_forced_construction() {
        let cfg = CorpusConfig {
            vocab: 1,
            frame_dim: 2,
            fixed_duration: Some(3),
            symbols_range: (2, 2),
            train_size: 1,
            val_size: 1,
            test_size: 1,
            ..CorpusConfig::default()
        };
        let set = generate_corpus(&cfg).unwrap();
        let u = &set.train.utterances[0];
        assert_eq!(u.frames.dim(0), 6);
        assert_eq!(u.boundaries, vec![(0, 3), (3, 3)]);
    }

    #[test]
    fn boundaries_partition_the_frame_axis() {
        let set = generate_corpus(&small_cfg()).unwrap();
        for u in &set.train.utterances {
            let mut t = 0usize;
            for &(start, len) in &u.boundaries {
                assert_eq!(start, t);
                assert!(len >= 1);
                t += len;
            }
            assert_eq!(t, u.frames.dim(0));
            assert_eq!(u.boundaries.len(), u.symbols.len());
        }
    }

    #[test]
    fn gaussian_segments_concentrate_on_targets() {
        let cfg = CorpusConfig {
            vocab: 2,
            frame_dim: 2,
            noise: NoiseFamily::Gaussian,
            noise_std: 0.3,
            drift_amp: 0.0,
            fixed_duration: Some(400),
            symbols_range: (2, 2),
            train_size: 3,
            val_size: 1,
            test_size: 1,
            ..CorpusConfig::default()
        };
        let set = generate_corpus(&cfg).unwrap();
        let targets = cfg.symbol_targets();
        for u in &set.train.utterances {
            for (i, &(start, len)) in u.boundaries.iter().enumerate() {
                let sym = u.symbols.symbols()[i];
                for c in 0..2 {
                    let seg_mean: f64 = (start..start + len)
                        .map(|t| u.frames.at2(t, c))
                        .sum::<f64>()
                        / len as f64;
                    let tol = 4.0 * cfg.noise_std / (len as f64).sqrt();
                    assert!(
                        (seg_mean - targets[sym][c]).abs() < tol,
                        "segment mean {seg_mean} vs target {}",
                        targets[sym][c]
                    );
                }
            }
        }
    }

    #[test]
    fn mean_durations_recovered_within_five_percent() {
        let cfg = CorpusConfig {
            vocab: 3,
            frame_dim: 2,
            train_size: 1000,
            val_size: 1,
            test_size: 1,
            symbols_range: (3, 6),
            ..CorpusConfig::default()
        };
        let set = generate_corpus(&cfg).unwrap();
        let means = cfg.symbol_mean_durations();
        let mut sums = vec![0.0; cfg.vocab];
        let mut counts = vec![0usize; cfg.vocab];
        for u in &set.train.utterances {
            for (i, &(_, len)) in u.boundaries.iter().enumerate() {
                let sym = u.symbols.symbols()[i];
                sums[sym] += len as f64;
                counts[sym] += 1;
            }
        }
        for s in 0..cfg.vocab {
            let got = sums[s] / counts[s] as f64;
            let rel = (got - means[s]).abs() / means[s];
            assert!(rel < 0.05, "symbol {s}: {got} vs {} (rel {rel})", means[s]);
        }
    }

    #[test]
    fn non_gaussian_families_fail_normality() {
        for (family, check_skew) in [(NoiseFamily::Bimodal, false), (NoiseFamily::Skewed, true)] {
            let cfg = CorpusConfig {
                noise: family,
                ..CorpusConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let samples: Vec<f64> = (0..10_000)
                .map(|_| draw_noise(&cfg, &mut rng)[0])
                .collect();
            let (skew, kurt) = skewness_excess_kurtosis(&samples);
            if check_skew {
                assert!(skew.abs() > 0.5, "{family:?} skew {skew}");
            } else {
                assert!(kurt.abs() > 0.5, "{family:?} excess kurtosis {kurt}");
            }
        }
        // and the gaussian family passes
        let cfg = CorpusConfig {
            noise: NoiseFamily::Gaussian,
            ..CorpusConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| draw_noise(&cfg, &mut rng)[0])
            .collect();
        let (skew, kurt) = skewness_excess_kurtosis(&samples);
        assert!(skew.abs() < 0.2 && kurt.abs() < 0.2, "gaussian {skew} {kurt}");
    }

    #[test]
    fn normalization_roundtrip_and_degenerate_channel() {
        let set = generate_corpus(&small_cfg()).unwrap();
        let stats = NormStats::fit(&set.train.utterances);
        let u = &set.train.utterances[0];
        let normed = stats.apply(&u.frames);
        let back = stats.invert(&normed);
        assert!(back.max_abs_diff(&u.frames) < 1e-12);

        // already-standardised data: identity-ish stats
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let std_utts = vec![Utterance {
            symbols: SymbolSequence::new(vec![0]),
            frames: Tensor::randn(&[20_000, 2], 1.0, &mut rng),
            boundaries: vec![(0, 20_000)],
        }];
        let s2 = NormStats::fit(&std_utts);
        assert!(s2.mean.iter().all(|m| m.abs() < 0.05));
        assert!(s2.std.iter().all(|s| (s - 1.0).abs() < 0.05));

        // constant channel: floored std, no blow-up
        let const_utts = vec![Utterance {
            symbols: SymbolSequence::new(vec![0]),
            frames: Tensor::full(&[50, 2], 2.5),
            boundaries: vec![(0, 50)],
        }];
        let s3 = NormStats::fit(&const_utts);
        assert_eq!(s3.std, vec![NORM_STD_FLOOR, NORM_STD_FLOOR]);
        let z = s3.apply(&const_utts[0].frames);
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = CorpusConfig {
            duration_mean_range: (0.5, 3.0),
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&bad).is_err());
        let bad = CorpusConfig {
            symbols_range: (3, 2),
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&bad).is_err());
        let bad = CorpusConfig {
            vocab: 0,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&bad).is_err());
    }
}
