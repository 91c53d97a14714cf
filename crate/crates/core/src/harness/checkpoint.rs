//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `DMCCKPT\0` |
//! | 4 | format version (u32) |
//! | 8 | manifest length `m` (u64) |
//! | m | UTF-8 TOML [`Manifest`] |
//! | 4 per element | every tensor in manifest order as f32 |
//! | 32 | SHA-256 of everything above |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dmc::DmcVariant;
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"DMCCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("tensor {name}: shape {found:?} does not match the model's {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// How the stored model attends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttentionSpec {
    /// Plain attention over every dimension.
    Standard,
    /// Plain attention with dimension 0 left out.
    Dim0Blind,
    /// Compressed cache; decisions come from `k[0] - decision_offset`
    /// unless `pool_width` fixes them.
    Compressed {
        variant: DmcVariant,
        decision_offset: f64,
        window: usize,
        pool_width: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    /// Phase that produced the checkpoint.
    pub phase: String,
    /// Steps completed within that phase.
    pub step: usize,
    /// Experiment seed; with `step` it determines every random stream.
    pub seed: u64,
    pub target_cr: Option<f64>,
    /// Compression ratio measured on the validation sequences.
    pub achieved_cr: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub attention: AttentionSpec,
    pub training: TrainingState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, attention: AttentionSpec, training: TrainingState) -> Self {
        let tensors = model
            .weights
            .named()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                model: model.config.clone(),
                attention,
                training,
                tensors,
            },
            model,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = toml::to_string(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER + manifest.len() + 4 * self.model.parameter_count() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in self.model.weights.named() {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER {
            if !MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
                return Err(CheckpointError::BadMagic);
            }
            return Err(CheckpointError::Truncated(format!("{} byte header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = HEADER
            .checked_add(mlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated("manifest extends past the end of the file".into()))?;
        let text = std::str::from_utf8(&bytes[HEADER..body]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| CheckpointError::Manifest(e.message().to_string()))?;
        let elements: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let expected_len = body + 4 * elements + DIGEST;
        if bytes.len() < expected_len {
            return Err(CheckpointError::Truncated(format!(
                "{} bytes, expected {expected_len}",
                bytes.len()
            )));
        }
        if bytes.len() > expected_len {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - expected_len
            )));
        }
        let (content, digest) = bytes.split_at(expected_len - DIGEST);
        if Sha256::digest(content).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Manifest("manifest and header versions disagree".into()));
        }
        let expected = ModelWeights::expected_shapes(&manifest.model);
        if expected.len() != manifest.tensors.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} tensors listed, the model has {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut offset = body;
        let mut tensors = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.into_iter().zip(&manifest.tensors) {
            if entry.name != name || entry.shape != shape {
                return Err(CheckpointError::Shape {
                    name: entry.name.clone(),
                    expected: shape,
                    found: entry.shape.clone(),
                });
            }
            let n: usize = shape.iter().product();
            let data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            offset += 4 * n;
            tensors.push((name, Tensor::new(&shape, data).expect("size checked")));
        }
        let weights = ModelWeights::from_named(&manifest.model, tensors)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let model =
            Model::from_weights(manifest.model.clone(), weights).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        Ok(Self { manifest, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable summary for `inspect-checkpoint`.
    pub fn describe(&self) -> String {
        let mut s = toml::to_string(&self.manifest).expect("manifest serializes");
        s.push_str(&format!("\n# parameters: {}\n", self.model.parameter_count()));
        s
    }
}

/// Rounds every weight to the nearest f32 so that the in-memory model is
/// exactly what a checkpoint stores.
pub fn round_weights(model: &mut Model) {
    model.weights.tensors_mut().into_iter().for_each(Tensor::round_to_f32);
}
