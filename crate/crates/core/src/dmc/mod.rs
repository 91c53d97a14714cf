//! Append-or-accumulate KV cache compression: the discrete decode-time
//! update and its differentiable training relaxation.

mod cache;
pub mod inference;
pub mod training;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

pub use cache::{DecisionSource, DmcCache, ScriptedDecisions};

/// Lower bound applied to importance weights so segment sums stay positive.
pub const OMEGA_FLOOR: f64 = 1e-6;

/// Training and decoding variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DmcVariant {
    /// Independent decisions per head.
    #[default]
    Dmc,
    /// Independent decisions plus the head-consistency loss.
    DmcC,
    /// One decision per layer and token, shared by every head. Decision and
    /// importance logits are the mean over heads.
    HardC,
    /// Every token gets the same importance weight 1.
    UniformOmega,
}

#[derive(Debug, Error)]
pub enum DmcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("cache has no slots")]
    EmptyCache,
    #[error("capacity exhausted: {0}")]
    Capacity(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
