//! Small decoder-only transformer: configuration, weights, a
//! differentiable batch forward and an incremental decoder.

mod decode;
mod forward;

pub use decode::{attend, KvCache, VanillaCache};
pub use forward::{AttentionMode, DecisionMode, DmcForward, ForwardOutput, ParamVars};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmc::DmcError;
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },
    #[error("cache is full at max_seq {max}")]
    Capacity { max: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    Token { token: usize, vocab: usize },
    #[error("attention over an empty cache")]
    EmptyCache,
    #[error("weight {name}: {detail}")]
    Weight { name: String, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dmc(#[from] DmcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionScheme {
    /// Learned position vectors added to the token embeddings.
    #[default]
    AbsoluteLearned,
    /// Rotary encoding applied to queries and keys before they are cached.
    RotaryPreCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ffn_mult: f64,
    pub position_scheme: PositionScheme,
    pub dmc_enabled: bool,
    /// Query heads per key/value head; 1 means plain multi-head attention.
    pub gqa_groups: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size: 256,
            max_seq: 256,
            ffn_mult: 2.0,
            position_scheme: PositionScheme::AbsoluteLearned,
            dmc_enabled: false,
            gqa_groups: 1,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_heads(&self) -> usize {
        self.n_heads / self.gqa_groups
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.d_model as f64 * self.ffn_mult).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return fail("n_layers, n_heads, d_model and vocab_size must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq == 0 {
            return fail("max_seq must be at least 1".into());
        }
        if self.gqa_groups == 0 || self.n_heads % self.gqa_groups != 0 {
            return fail(format!("n_heads {} is not divisible by gqa_groups {}", self.n_heads, self.gqa_groups));
        }
        if self.dmc_enabled && self.head_dim() < 2 {
            return fail("compression needs head_dim >= 2".into());
        }
        if self.dmc_enabled && self.gqa_groups != 1 {
            return fail("compression is only supported with gqa_groups = 1".into());
        }
        if !(self.ffn_mult > 0.0) || !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return fail("ffn_mult, norm_eps and rope_base must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    /// `[n_heads, d_h, d_h]`: head `h` projects input slice `h`.
    pub wq: Tensor,
    /// `[kv_heads, groups * d_h, d_h]`: key head `j` reads the concatenated
    /// input slices of its query group.
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub w3: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl ModelWeights {
    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        if let Some(p) = &self.pos_emb {
            out.push(("pos_emb".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w1", &l.w1),
                ("w3", &l.w3),
                ("w2", &l.w2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable tensors in the same order as [`ModelWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        if let Some(p) = &mut self.pos_emb {
            out.push(p);
        }
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.w3,
                &mut l.w2,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Expected shapes for `config`, keyed like [`ModelWeights::named`].
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, dh, h, kv, f) = (
            config.d_model,
            config.head_dim(),
            config.n_heads,
            config.kv_heads(),
            config.ffn_hidden(),
        );
        let mut out = vec![("tok_emb".to_string(), vec![config.vocab_size, d])];
        if config.position_scheme == PositionScheme::AbsoluteLearned {
            out.push(("pos_emb".into(), vec![config.max_seq, d]));
        }
        for i in 0..config.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![h, dh, dh]),
                ("wk", vec![kv, config.gqa_groups * dh, dh]),
                ("wv", vec![kv, config.gqa_groups * dh, dh]),
                ("wo", vec![d, d]),
                ("ffn_norm", vec![d]),
                ("w1", vec![d, f]),
                ("w3", vec![d, f]),
                ("w2", vec![f, d]),
            ] {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_norm".into(), vec![d]));
        out.push(("lm_head".into(), vec![d, config.vocab_size]));
        out
    }

    /// Rebuilds weights from named tensors, checking names and shapes.
    pub fn from_named(config: &ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let expected = Self::expected_shapes(config);
        if tensors.len() != expected.len() {
            return Err(ModelError::Weight {
                name: "*".into(),
                detail: format!("expected {} tensors, found {}", expected.len(), tensors.len()),
            });
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(ModelError::Weight {
                    name: got_name.clone(),
                    detail: format!("expected {name} with shape {shape:?}, found shape {:?}", t.shape()),
                });
            }
        }
        let mut it = tensors.drain(..).map(|(_, t)| t);
        let mut next = || it.next().expect("count checked above");
        let tok_emb = next();
        let pos_emb = (config.position_scheme == PositionScheme::AbsoluteLearned).then(&mut next);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w1: next(),
                w3: next(),
                w2: next(),
            })
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm: next(),
            lm_head: next(),
        })
    }
}

/// Configuration plus weights. Read-only during decoding, so one model can
/// serve many sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

const EMBED_STD: f64 = 0.02;

impl Model {
    /// Seeded random initialization. Projections draw from
    /// `N(0, 1/fan_in)`; the two residual output projections are further
    /// scaled by `1/sqrt(2 * n_layers)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        };
        let (d, dh, h, kv, f) = (
            config.d_model,
            config.head_dim(),
            config.n_heads,
            config.kv_heads(),
            config.ffn_hidden(),
        );
        let g = config.gqa_groups;
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal(&[config.vocab_size, d], EMBED_STD);
        let pos_emb =
            (config.position_scheme == PositionScheme::AbsoluteLearned).then(|| normal(&[config.max_seq, d], EMBED_STD));
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::filled(&[d], 1.0),
                wq: normal(&[h, dh, dh], 1.0 / (dh as f64).sqrt()),
                wk: normal(&[kv, g * dh, dh], 1.0 / ((g * dh) as f64).sqrt()),
                wv: normal(&[kv, g * dh, dh], 1.0 / ((g * dh) as f64).sqrt()),
                wo: normal(&[d, d], residual / (d as f64).sqrt()),
                ffn_norm: Tensor::filled(&[d], 1.0),
                w1: normal(&[d, f], 1.0 / (d as f64).sqrt()),
                w3: normal(&[d, f], 1.0 / (d as f64).sqrt()),
                w2: normal(&[f, d], residual / (f as f64).sqrt()),
            })
            .collect();
        let weights = ModelWeights {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::filled(&[d], 1.0),
            lm_head: normal(&[d, config.vocab_size], EMBED_STD),
        };
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate()?;
        let named: Vec<(String, Tensor)> = weights.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let weights = ModelWeights::from_named(&config, named)?;
        for (name, t) in weights.named() {
            if !t.is_finite() {
                return Err(ModelError::Weight {
                    name,
                    detail: "contains non-finite values".into(),
                });
            }
        }
        Ok(Self { config, weights })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::Length {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Token {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Per-head projections of one normalized input row: `q` for every
    /// query head, `k` and `v` for every key/value head.
    pub fn project_qkv(&self, layer: usize, x: &[f64], q: &mut [f64], k: &mut [f64], v: &mut [f64]) {
        let c = &self.config;
        let (dh, g) = (c.head_dim(), c.gqa_groups);
        let lw = &self.weights.layers[layer];
        for h in 0..c.n_heads {
            let w = &lw.wq.data()[h * dh * dh..(h + 1) * dh * dh];
            vec_mat(&x[h * dh..(h + 1) * dh], w, dh, &mut q[h * dh..(h + 1) * dh]);
        }
        let s = g * dh;
        for j in 0..c.kv_heads() {
            let input = &x[j * s..(j + 1) * s];
            let wk = &lw.wk.data()[j * s * dh..(j + 1) * s * dh];
            let wv = &lw.wv.data()[j * s * dh..(j + 1) * s * dh];
            vec_mat(input, wk, dh, &mut k[j * dh..(j + 1) * dh]);
            vec_mat(input, wv, dh, &mut v[j * dh..(j + 1) * dh]);
        }
    }
}

/// `out = x . w` for a row vector `x` and row-major `w` with `cols` columns.
pub(crate) fn vec_mat(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    crate::numerics::kernels::gemm(1, x.len(), cols, x, false, w, false, 0.0, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            max_seq: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let bad = ModelConfig { d_model: 9, ..tiny() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            n_heads: 8,
            dmc_enabled: true,
            ..tiny()
        };
        assert!(bad.validate().is_err(), "head_dim 1 cannot carry a decision dim");
        let bad = ModelConfig { gqa_groups: 3, ..tiny() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { max_seq: 0, ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn named_round_trip() {
        let m = Model::init(tiny(), 3).unwrap();
        let named: Vec<(String, Tensor)> = m.weights.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = ModelWeights::from_named(&m.config, named.clone()).unwrap();
        assert_eq!(back, m.weights);
        let mut swapped = named;
        swapped.swap(1, 2);
        assert!(ModelWeights::from_named(&m.config, swapped).is_err());
    }

    #[test]
    fn identity_projection_copies_head_slices() {
        let mut m = Model::init(tiny(), 0).unwrap();
        let dh = m.config.head_dim();
        let eye = Tensor::from_fn(&[2, dh, dh], |i| if (i % (dh * dh)) % (dh + 1) == 0 { 1.0 } else { 0.0 });
        m.weights.layers[0].wq = eye.clone();
        m.weights.layers[0].wk = eye.clone();
        m.weights.layers[0].wv = eye;
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        let (mut q, mut k, mut v) = (vec![9.0; 8], vec![9.0; 8], vec![9.0; 8]);
        m.project_qkv(0, &x, &mut q, &mut k, &mut v);
        assert_eq!(q, x);
        assert_eq!(k, x);
        assert_eq!(v, x);
        m.project_qkv(0, &[0.0; 8], &mut q, &mut k, &mut v);
        assert!(q.iter().chain(&k).chain(&v).all(|x| *x == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Model::init(tiny(), 5).unwrap(), Model::init(tiny(), 5).unwrap());
        assert_ne!(Model::init(tiny(), 5).unwrap(), Model::init(tiny(), 6).unwrap());
    }
}
