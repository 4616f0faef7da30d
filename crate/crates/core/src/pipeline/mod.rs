//! End-to-end pipeline: configuration, data files, checkpoints, the
//! two-stage training driver, evaluation and exports.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod export;
pub mod train;

pub use checkpoint::{Checkpoint, Progress};
pub use config::{Preset, RunConfig, TrainConfig};
pub use data::{load_dataset, write_toy_splits, DatasetManifest, ToySplits};
pub use eval::{evaluate, EvalReport};
pub use train::{run_spst, run_training, LogRecord, TrainData, Trainer};
