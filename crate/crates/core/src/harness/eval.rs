//! Validation loss and perplexity under every attention path.

use serde::{Deserialize, Serialize};

use crate::baselines::{fixed_pool_alphas, fixed_pool_decisions, Budget, EvictionCache, EvictionPolicy};
use crate::dmc::inference::{compression_ratio, CompressionReport, FlatSlots, SlotStore};
use crate::dmc::training::GumbelParams;
use crate::dmc::{DecisionSource, DmcCache, DmcVariant};
use crate::model::{AttentionMode, DecisionMode, DmcForward, KvCache, Model, ParamVars, VanillaCache};
use crate::numerics::{kernels, Tape, Tensor};

use super::checkpoint::{AttentionSpec, Checkpoint};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Full cache. Models whose dimension 0 carries compression logits
    /// attend without it.
    Vanilla,
    /// Parallel teacher-forced pass with discrete decisions.
    DmcTrainPath,
    /// Token-by-token decoding through the compressed cache.
    DmcInferPath,
    H2o,
    Tova,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    pub sequences: usize,
    pub tokens: usize,
    pub loss: f64,
    pub perplexity: f64,
    /// Measured compression ratio for the compressed paths.
    pub compression_ratio: Option<f64>,
}

/// Mean next-token cross-entropy of `logits` rows against `targets`.
fn summed_nll(logits: impl IntoIterator<Item = impl AsRef<[f64]>>, targets: &[usize]) -> f64 {
    logits
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let row = row.as_ref();
            kernels::log_sum_exp(row) - row[t]
        })
        .sum()
}

fn tensor_rows(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    let cols = t.shape()[1];
    t.data().chunks(cols)
}

/// Attention used to score a model without compression.
pub fn uncompressed_mode(spec: &AttentionSpec) -> AttentionMode<'static> {
    match spec {
        AttentionSpec::Standard => AttentionMode::STANDARD,
        AttentionSpec::Dim0Blind | AttentionSpec::Compressed { .. } => AttentionMode::DIM0_BLIND,
    }
}

/// Mean loss over `seqs` (each `n + 1` tokens) under `mode`.
pub fn eval_loss(model: &Model, seqs: &[Vec<usize>], mode: &AttentionMode<'_>) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    let mut count = 0;
    for s in seqs {
        let (input, targets) = split(s)?;
        let logits = model.forward_eval(input, mode)?;
        total += summed_nll(tensor_rows(&logits), targets);
        count += targets.len();
    }
    Ok(total / count as f64)
}

fn split(seq: &[usize]) -> Result<(&[usize], &[usize]), HarnessError> {
    if seq.len() < 2 {
        return Err(HarnessError::Data("evaluation sequences need at least two tokens".into()));
    }
    Ok((&seq[..seq.len() - 1], &seq[1..]))
}

struct Compressed {
    variant: DmcVariant,
    offset: f64,
    pool_width: Option<usize>,
}

fn compressed(spec: &AttentionSpec) -> Result<Compressed, HarnessError> {
    match *spec {
        AttentionSpec::Compressed {
            variant,
            decision_offset,
            pool_width,
            ..
        } => Ok(Compressed {
            variant,
            offset: decision_offset,
            pool_width,
        }),
        _ => Err(HarnessError::Config("this mode needs a checkpoint trained for compression".into())),
    }
}

/// Decode-time cache for a compressed checkpoint.
pub fn compressed_cache(model: &Model, spec: &AttentionSpec) -> Result<DmcCache, HarnessError> {
    let dh = model.config.head_dim();
    compressed_cache_with(model, spec, |_, _| FlatSlots::new(dh))
}

/// Like [`compressed_cache`] with caller-provided storage per layer and
/// head.
pub fn compressed_cache_with<S: SlotStore>(
    model: &Model,
    spec: &AttentionSpec,
    make: impl FnMut(usize, usize) -> S,
) -> Result<DmcCache<S>, HarnessError> {
    let c = compressed(spec)?;
    let mut cache = DmcCache::with_stores(&model.config, c.offset, c.variant, make)?;
    if let Some(w) = c.pool_width {
        cache = cache.with_source(DecisionSource::Scripted(fixed_pool_decisions(w)));
    }
    Ok(cache)
}

/// Teacher-forced pass with discrete decisions and the exact recurrence.
/// Returns the logits and one `[heads, n]` decision tensor per layer.
pub fn train_path_forward(
    model: &Model,
    spec: &AttentionSpec,
    tokens: &[usize],
) -> Result<(Tensor, Vec<Tensor>), HarnessError> {
    let c = compressed(spec)?;
    let cfg = &model.config;
    let scripted = c
        .pool_width
        .map(|w| fixed_pool_alphas(cfg.n_layers, cfg.n_heads, tokens.len(), w));
    let decisions = match &scripted {
        Some(a) => DecisionMode::Scripted(a),
        None => DecisionMode::Hard,
    };
    let mode = AttentionMode::Dmc(DmcForward {
        gumbel: GumbelParams { tau: 1.0, c: c.offset },
        window: tokens.len(),
        variant: c.variant,
        decisions,
    });
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, &model.weights, false);
    let out = model.forward_tape(&mut tape, &params, tokens, &mode)?;
    let alphas = out.alphas.iter().map(|a| tape.value(*a).clone()).collect();
    Ok((tape.value(out.logits).clone(), alphas))
}

/// Compression achieved on `seqs` (inputs only), measured from discrete
/// decisions of the teacher-forced pass. Uncompressed models report 1.
pub fn measure_cr(model: &Model, spec: &AttentionSpec, seqs: &[Vec<usize>]) -> Result<CompressionReport, HarnessError> {
    let cfg = &model.config;
    let mut lengths = vec![vec![0usize; cfg.n_heads]; cfg.n_layers];
    let mut seen = 0;
    for s in seqs {
        let (input, _) = split(s)?;
        let n = input.len();
        seen += n;
        if matches!(spec, AttentionSpec::Compressed { .. }) {
            let (_, alphas) = train_path_forward(model, spec, input)?;
            for (l, a) in alphas.iter().enumerate() {
                for (h, row) in a.data().chunks(n).enumerate() {
                    lengths[l][h] += row.iter().filter(|&&x| x == 0.0).count();
                }
            }
        } else {
            lengths.iter_mut().flatten().for_each(|x| *x += n);
        }
    }
    Ok(compression_ratio(&lengths, seen)?)
}

/// Mean loss over `seqs` of the teacher-forced compressed pass.
pub fn train_path_loss(model: &Model, spec: &AttentionSpec, seqs: &[Vec<usize>]) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    let mut count = 0;
    for s in seqs {
        let (input, targets) = split(s)?;
        let (logits, _) = train_path_forward(model, spec, input)?;
        total += summed_nll(tensor_rows(&logits), targets);
        count += targets.len();
    }
    Ok(total / count as f64)
}

fn decode_nll(model: &Model, seq: &[usize], cache: &mut dyn KvCache) -> Result<f64, HarnessError> {
    let (input, targets) = split(seq)?;
    let logits = model.decode_sequence(input, cache)?;
    Ok(summed_nll(&logits, targets))
}

/// Perplexity `exp(mean loss)` of `checkpoint` on `seqs`. Eviction modes
/// size their budget as `floor(n / eviction_cr)`.
pub fn eval_perplexity(
    checkpoint: &Checkpoint,
    seqs: &[Vec<usize>],
    mode: EvalMode,
    eviction_cr: f64,
) -> Result<EvalResult, HarnessError> {
    if seqs.is_empty() {
        return Err(HarnessError::Data("no evaluation sequences".into()));
    }
    let model = &checkpoint.model;
    let spec = &checkpoint.manifest.attention;
    let tokens: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut cr = None;
    let total: f64 = match mode {
        EvalMode::Vanilla => eval_loss(model, seqs, &uncompressed_mode(spec))? * tokens as f64,
        EvalMode::DmcTrainPath => {
            cr = Some(measure_cr(model, spec, seqs)?.global);
            train_path_loss(model, spec, seqs)? * tokens as f64
        }
        EvalMode::DmcInferPath => {
            let mut total = 0.0;
            let cfg = &model.config;
            let mut lengths = vec![vec![0usize; cfg.n_heads]; cfg.n_layers];
            for s in seqs {
                let mut cache = compressed_cache(model, spec)?;
                total += decode_nll(model, s, &mut cache)?;
                for (acc, l) in lengths.iter_mut().flatten().zip(cache.lengths().concat()) {
                    *acc += l;
                }
            }
            cr = Some(compression_ratio(&lengths, tokens)?.global);
            total
        }
        EvalMode::H2o | EvalMode::Tova => {
            let policy = if mode == EvalMode::H2o { EvictionPolicy::H2o } else { EvictionPolicy::Tova };
            let exclude = !matches!(spec, AttentionSpec::Standard);
            let mut total = 0.0;
            for s in seqs {
                let budget = Budget::Ratio {
                    cr: eviction_cr,
                    prompt_len: s.len() - 1,
                };
                let mut cache = EvictionCache::new(&model.config, policy, budget)?.with_dim0_excluded(exclude);
                total += decode_nll(model, s, &mut cache)?;
            }
            total
        }
    };
    let loss = total / tokens as f64;
    Ok(EvalResult {
        mode,
        sequences: seqs.len(),
        tokens,
        loss,
        perplexity: loss.exp(),
        compression_ratio: cr,
    })
}

/// Vanilla cache matching how `spec` attends without compression.
pub fn uncompressed_cache(model: &Model, spec: &AttentionSpec) -> VanillaCache {
    VanillaCache::with_dim0(&model.config, !matches!(spec, AttentionSpec::Standard), 1.0)
}
