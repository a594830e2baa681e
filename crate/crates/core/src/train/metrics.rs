//! Append-only metrics log: one JSON record per line, machine-parseable.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Per-frame negative log-likelihood of the training batch.
    pub train_nll_frame: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nll_frame: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loglik_seq: Option<f64>,
}

pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(MetricsLog {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(MetricsLog {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(record).expect("metrics serialise");
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("metrics parse"))
        .collect())
}
