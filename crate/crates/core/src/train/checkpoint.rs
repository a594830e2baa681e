//! Versioned binary checkpoints carrying every bit of mutable training
//! state: parameters, optimiser moments, normalisation stats, rng position,
//! epoch cursor and config echoes. Loading must resume training
//! bit-identically.

use std::fs;
use std::path::Path;

use crate::data::CorpusConfig;
use crate::tensor::Tensor;

use super::{TrainConfig, TrainError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OFCKPT\0\0";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub train_config: TrainConfig,
    pub corpus_config: CorpusConfig,
    pub param_names: Vec<String>,
    pub param_values: Vec<Tensor>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub dropout_seed: [u8; 32],
    pub dropout_word_pos: u128,
    pub epoch: u64,
    pub batch_pos: u64,
    pub actnorm_initialized: bool,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Dec<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| TrainError::Checkpoint(format!("bad string: {e}")))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut e = Enc { buf: Vec::new() };
        e.buf.extend_from_slice(MAGIC);
        e.u32(CHECKPOINT_VERSION);
        e.u64(self.step);
        let tc = toml::to_string(&self.train_config)
            .map_err(|err| TrainError::Checkpoint(err.to_string()))?;
        e.str(&tc);
        let cc = toml::to_string(&self.corpus_config)
            .map_err(|err| TrainError::Checkpoint(err.to_string()))?;
        e.str(&cc);

        e.u32(self.param_values.len() as u32);
        for (name, value) in self.param_names.iter().zip(&self.param_values) {
            e.str(name);
            e.u32(value.rank() as u32);
            for &d in value.shape() {
                e.u32(d as u32);
            }
            e.f64s(value.data());
        }
        e.u64(self.adam_step);
        for m in &self.adam_m {
            e.f64s(m);
        }
        for v in &self.adam_v {
            e.f64s(v);
        }
        e.u32(self.norm_mean.len() as u32);
        e.f64s(&self.norm_mean);
        e.f64s(&self.norm_std);
        e.buf.extend_from_slice(&self.dropout_seed);
        e.buf.extend_from_slice(&self.dropout_word_pos.to_le_bytes());
        e.u64(self.epoch);
        e.u64(self.batch_pos);
        e.buf.push(self.actnorm_initialized as u8);
        let ck = fnv64(&e.buf);
        e.buf.extend_from_slice(&ck.to_le_bytes());
        fs::write(path, e.buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint file".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv64(body) != stored {
            return Err(TrainError::Checkpoint("checksum failure".into()));
        }
        let mut d = Dec { bytes: body, pos: 8 };
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let step = d.u64()?;
        let train_config: TrainConfig = toml::from_str(&d.str()?)
            .map_err(|e| TrainError::Checkpoint(format!("bad train config echo: {e}")))?;
        let corpus_config: CorpusConfig = toml::from_str(&d.str()?)
            .map_err(|e| TrainError::Checkpoint(format!("bad corpus config echo: {e}")))?;

        let count = d.u32()? as usize;
        let mut param_names = Vec::with_capacity(count);
        let mut param_values = Vec::with_capacity(count);
        for _ in 0..count {
            param_names.push(d.str()?);
            let rank = d.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(d.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            param_values.push(Tensor::new(shape, d.f64s(numel)?));
        }
        let adam_step = d.u64()?;
        let mut adam_m = Vec::with_capacity(count);
        for t in &param_values {
            adam_m.push(d.f64s(t.numel())?);
        }
        let mut adam_v = Vec::with_capacity(count);
        for t in &param_values {
            adam_v.push(d.f64s(t.numel())?);
        }
        let nd = d.u32()? as usize;
        let norm_mean = d.f64s(nd)?;
        let norm_std = d.f64s(nd)?;
        let dropout_seed: [u8; 32] = d.take(32)?.try_into().unwrap();
        let dropout_word_pos = u128::from_le_bytes(d.take(16)?.try_into().unwrap());
        let epoch = d.u64()?;
        let batch_pos = d.u64()?;
        let actnorm_initialized = d.take(1)?[0] != 0;
        Ok(Checkpoint {
            step,
            train_config,
            corpus_config,
            param_names,
            param_values,
            adam_step,
            adam_m,
            adam_v,
            norm_mean,
            norm_std,
            dropout_seed,
            dropout_word_pos,
            epoch,
            batch_pos,
            actnorm_initialized,
        })
    }
}
