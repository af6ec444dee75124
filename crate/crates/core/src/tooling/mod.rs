//! Checkpoints, run logs and resume support.

mod checkpoint;
mod logging;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind, CheckpointMeta, CheckpointRecord};
pub use logging::{csv_header, format_float, read_metrics_csv, RunLog};
