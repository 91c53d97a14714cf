use crate::model::{LayerWeights, Model, ModelConfig, ModelError, ModelWeights};
use crate::numerics::Tensor;

use super::BaselineError;

/// Merges the key and value projections of every `g` consecutive heads.
///
/// The source layer must have one key/value head per query head. Each
/// merged key head reads the concatenated inputs of its group, and its
/// block for member `i` is that member's matrix divided by `g`, so the
/// merged key equals the mean of the group's original keys. Queries and
/// everything else are copied unchanged.
pub fn gqa_convert(
    layer: &LayerWeights,
    n_heads: usize,
    head_dim: usize,
    g: usize,
) -> Result<LayerWeights, BaselineError> {
    if g == 0 || n_heads % g != 0 {
        return Err(BaselineError::Config(format!("{n_heads} heads are not divisible into groups of {g}")));
    }
    let per_head = [n_heads, head_dim, head_dim];
    for (name, t) in [("wk", &layer.wk), ("wv", &layer.wv)] {
        if t.shape() != per_head {
            return Err(BaselineError::Config(format!(
                "{name} has shape {:?}, expected one {head_dim}x{head_dim} matrix per head",
                t.shape()
            )));
        }
    }
    // Head-major [n_h, d_h, d_h] already lays the group members out as the
    // row blocks of [n_h / g, g * d_h, d_h]; only the 1/g scale changes.
    let merge = |t: &Tensor| {
        let data = t.data().iter().map(|x| x / g as f64).collect();
        Tensor::new(&[n_heads / g, g * head_dim, head_dim], data).expect("sizes agree")
    };
    let mut out = layer.clone();
    if g > 1 {
        out.wk = merge(&layer.wk);
        out.wv = merge(&layer.wv);
    }
    Ok(out)
}

/// Converts a full model to `g` query heads per key/value head.
pub fn gqa_convert_model(model: &Model, g: usize) -> Result<Model, BaselineError> {
    let c = &model.config;
    if c.gqa_groups != 1 {
        return Err(BaselineError::Config("source model is already grouped".into()));
    }
    if c.dmc_enabled {
        return Err(BaselineError::Config("grouped conversion needs a model without compression".into()));
    }
    let layers = model
        .weights
        .layers
        .iter()
        .map(|l| gqa_convert(l, c.n_heads, c.head_dim(), g))
        .collect::<Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        gqa_groups: g,
        ..c.clone()
    };
    let weights = ModelWeights {
        layers,
        ..model.weights.clone()
    };
    Model::from_weights(config, weights).map_err(|e: ModelError| BaselineError::Config(e.to_string()))
}
