//! Self-describing binary container for corpus splits.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8  b"OFCORPUS"
//! version  u32
//! split    u8
//! config   u32 length + TOML bytes (echo; regenerates the corpus)
//! count    u32
//! records  per utterance:
//!            M u32, M x u32 symbols,
//!            T u32, T*D x f64 frames (row-major bits),
//!            M x (u32 start, u32 len) boundary spans
//! checksum u64 FNV-1a over everything above
//! ```
//!
//! Frames are stored as raw f64 bits, so load(save(c)) == c bitwise.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nhmm::SymbolSequence;
use crate::tensor::Tensor;

use super::{Corpus, CorpusConfig, Split, Utterance};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OFCORPUS";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a corpus container (bad magic)")]
    BadMagic,
    #[error("container version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated record at utterance {utterance}")]
    Truncated { utterance: usize },
    #[error("checksum failure: container corrupted")]
    Checksum,
    #[error("invalid config echo: {0}")]
    Config(String),
    #[error("unknown split tag {0}")]
    SplitTag(u8),
}

pub(crate) fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), ContainerError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    buf.push(corpus.split.tag());
    let cfg = toml::to_string(&corpus.config).map_err(|e| ContainerError::Config(e.to_string()))?;
    push_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(cfg.as_bytes());
    push_u32(&mut buf, corpus.utterances.len() as u32);
    for u in &corpus.utterances {
        push_u32(&mut buf, u.symbols.len() as u32);
        for &s in u.symbols.symbols() {
            push_u32(&mut buf, s as u32);
        }
        push_u32(&mut buf, u.frames.dim(0) as u32);
        for v in u.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &(start, len) in &u.boundaries {
            push_u32(&mut buf, start as u32);
            push_u32(&mut buf, len as u32);
        }
    }
    let checksum = fnv64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    utterance: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Truncated {
                utterance: self.utterance,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, ContainerError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    // checksum covers everything before the trailing u64
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if fnv64(body) != stored {
        return Err(ContainerError::Checksum);
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        utterance: 0,
    };
    cur.take(8)?; // magic, already verified
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let split = match cur.take(1)?[0] {
        0 => Split::Train,
        1 => Split::Val,
        2 => Split::Test,
        t => return Err(ContainerError::SplitTag(t)),
    };
    let cfg_len = cur.u32()? as usize;
    let cfg_str = std::str::from_utf8(cur.take(cfg_len)?)
        .map_err(|e| ContainerError::Config(e.to_string()))?;
    let config: CorpusConfig =
        toml::from_str(cfg_str).map_err(|e| ContainerError::Config(e.to_string()))?;
    let d = config.frame_dim;
    let count = cur.u32()? as usize;
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        cur.utterance = i;
        let m = cur.u32()? as usize;
        let mut symbols = Vec::with_capacity(m);
        for _ in 0..m {
            symbols.push(cur.u32()? as usize);
        }
        let t_len = cur.u32()? as usize;
        let mut frames = Vec::with_capacity(t_len * d);
        for _ in 0..t_len * d {
            frames.push(cur.f64()?);
        }
        let mut boundaries = Vec::with_capacity(m);
        for _ in 0..m {
            let start = cur.u32()? as usize;
            let len = cur.u32()? as usize;
            boundaries.push((start, len));
        }
        utterances.push(Utterance {
            symbols: SymbolSequence::new(symbols),
            frames: Tensor::new(vec![t_len, d], frames),
            boundaries,
        });
    }
    Ok(Corpus {
        config,
        split,
        utterances,
    })
}
