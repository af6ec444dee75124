use std::path::{Path, PathBuf};

use fairtrain_tensor::Container;
use serde::{Deserialize, Serialize};

use crate::data::mnist::atomic_write;
use crate::error::{Error, Result};
use crate::seed::SeedSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Latest,
    Best,
    Epoch(usize),
    /// Written when a run aborts mid-epoch.
    Abort,
}

impl CheckpointKind {
    pub fn file_name(self) -> String {
        match self {
            CheckpointKind::Latest => "ckpt_latest".into(),
            CheckpointKind::Best => "ckpt_best".into(),
            CheckpointKind::Epoch(k) => format!("ckpt_epoch{k}"),
            CheckpointKind::Abort => "ckpt_abort".into(),
        }
    }
}

/// Scalar bookkeeping stored alongside the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_value: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Reports of the best epoch, one per evaluation split.
    pub best_reports: Vec<crate::evaluation::MetricReport>,
    pub seeds: SeedSnapshot,
    pub optimizer_steps: u64,
    pub model_fingerprint: String,
    pub method: String,
    pub method_meta: serde_json::Value,
}

/// Everything needed to continue a run: arrays live in `arrays` under
/// `model/`, `optim/` and `method/` prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub config_fingerprint: String,
    pub meta: CheckpointMeta,
    pub arrays: Container,
}

/// Atomically writes `record` into `dir`; returns the file path.
pub fn save_checkpoint(dir: &Path, record: &CheckpointRecord, kind: CheckpointKind) -> Result<PathBuf> {
    let mut c = record.arrays.clone();
    c.fingerprint = record.config_fingerprint.clone();
    c.meta = serde_json::to_value(&record.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(kind.file_name());
    atomic_write(&path, &c.to_bytes()?)?;
    Ok(path)
}

/// Reads a checkpoint; with `expected_fingerprint` set, a mismatch is an error.
pub fn load_checkpoint(path: &Path, expected_fingerprint: Option<&str>) -> Result<CheckpointRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Container::from_bytes(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(fp) = expected_fingerprint {
        if c.fingerprint != fp {
            return Err(Error::Checkpoint(format!(
                "{}: config fingerprint mismatch (checkpoint {}, config {fp}); the config changed since this run, pass --force to load anyway",
                path.display(),
                short(&c.fingerprint)
            )));
        }
    }
    let meta: CheckpointMeta = serde_json::from_value(std::mem::take(&mut c.meta))
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let config_fingerprint = std::mem::take(&mut c.fingerprint);
    Ok(CheckpointRecord { config_fingerprint, meta, arrays: c })
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}
