//! Comparison systems: grouped-query conversion, attention-score eviction
//! and fixed-width pooling.

mod eviction;
mod gqa;
mod pooling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eviction::{eviction_budget, h2o_evict, tova_evict, Budget, EvictionCache, EvictionState};
pub use gqa::{gqa_convert, gqa_convert_model};
pub use pooling::{fixed_pool, fixed_pool_alphas, fixed_pool_decisions};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvictionPolicy {
    /// Recent window plus the tokens with the largest accumulated attention.
    H2o,
    /// Drops the token the newest query attends to least.
    Tova,
}
