//! Experiment harness: synthetic scenes, teacher and student training,
//! ablations, evaluation, checkpoints and heatmaps.

pub mod ablate;
pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod eval;
pub mod heatmap;
pub mod metrics;
pub mod rng;
pub mod scene;
pub mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{AttentionVariant, ExperimentConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] icd_core::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },
    #[error("image parse error: {0}")]
    Image(String),
    #[error("training diverged at iteration {iter} (seed {seed}): {what}")]
    Diverged { iter: usize, seed: u64, what: String },
}

impl From<icd_core::TensorError> for HarnessError {
    fn from(e: icd_core::TensorError) -> Self {
        Self::Core(e.into())
    }
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
