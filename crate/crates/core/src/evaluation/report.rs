//! JSON metric reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<MetricEntry>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub corpus_hash: String,
}

impl MetricReport {
    pub fn new(config: serde_json::Value, seed: u64, corpus_hash: String) -> Self {
        Self { metrics: Vec::new(), config, seed, corpus_hash }
    }

    pub fn push(&mut self, metric: &str, value: f64) {
        self.metrics.push(MetricEntry { metric: metric.to_string(), value });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|e| e.metric == metric).map(|e| e.value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 over the shapes and bit patterns of a set of motions and captions.
pub fn corpus_hash(motions: &[Mat], captions: &[String]) -> String {
    let mut h = Sha256::new();
    h.update((motions.len() as u64).to_le_bytes());
    for m in motions {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    for c in captions {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Reads a beat list stored as a JSON array of frame indices.
pub fn read_beats(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
