use crate::dmc::ScriptedDecisions;

use super::BaselineError;

/// Replaces each run of `width` consecutive slots by its mean; a trailing
/// partial run is averaged over its own length. `keys` and `values` are
/// row-major with `dim` columns.
pub fn fixed_pool(
    keys: &[f64],
    values: &[f64],
    dim: usize,
    width: usize,
) -> Result<(Vec<f64>, Vec<f64>), BaselineError> {
    if width == 0 || dim == 0 {
        return Err(BaselineError::Config("pool width and dim must be positive".into()));
    }
    if keys.len() != values.len() || keys.len() % dim != 0 {
        return Err(BaselineError::Config("keys and values must both be n x dim".into()));
    }
    let pool = |x: &[f64]| {
        x.chunks(width * dim)
            .flat_map(|group| {
                let count = (group.len() / dim) as f64;
                (0..dim).map(move |c| group.iter().skip(c).step_by(dim).sum::<f64>() / count)
            })
            .collect()
    };
    Ok((pool(keys), pool(values)))
}

/// Decode-time decisions that merge every token into its width-aligned
/// group: token `t` opens a new slot iff `t % width == 0`.
pub fn fixed_pool_decisions(width: usize) -> ScriptedDecisions {
    let width = width.max(1);
    Box::new(move |_, _, t| t % width != 0)
}

/// The same decisions laid out for the training forward pass: one
/// `[n_heads * n]` row-major vector per layer.
pub fn fixed_pool_alphas(n_layers: usize, n_heads: usize, n: usize, width: usize) -> Vec<Vec<f64>> {
    let width = width.max(1);
    let row: Vec<f64> = (0..n).map(|t| if t % width == 0 { 0.0 } else { 1.0 }).collect();
    vec![row.repeat(n_heads); n_layers]
}
