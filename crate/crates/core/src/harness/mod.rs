//! Experiment pipeline: corpus ingestion, pre-training, the compression
//! retrofit, evaluation, analysis reports, decode benchmarks and
//! checkpoints.

pub mod analyze;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod train;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::dmc::DmcError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

pub use checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dmc(#[from] DmcError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for bad or
    /// missing data, 4 for numerical aborts and 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Baseline(_) => 2,
            HarnessError::Model(ModelError::Config(_)) | HarnessError::Dmc(DmcError::Config(_) | DmcError::Schedule(_)) => 2,
            HarnessError::Data(_) | HarnessError::Checkpoint(_) => 3,
            HarnessError::Model(ModelError::Token { .. } | ModelError::Length { .. }) => 3,
            HarnessError::Numerical(_) | HarnessError::Numerics(NumericsError::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Random streams used by the pipeline. Each `(seed, stream, step)` triple
/// gets its own generator, so any step can be replayed in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    PretrainData = 2,
    AnnealData = 3,
    RetrofitData = 4,
    RetrofitNoise = 5,
    Bench = 6,
}

pub fn stream_rng(seed: u64, stream: Stream, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
