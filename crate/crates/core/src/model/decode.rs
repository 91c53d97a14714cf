use crate::dmc::inference::{FlatSlots, SlotStore};
use crate::numerics::kernels;

use super::{vec_mat, Model, ModelConfig, ModelError, PositionScheme};

/// Softmax attention of one query head over a slot store. Scores are
/// `q . k / sqrt(d_h)`; with `exclude_dim0` dimension 0 is left out of the
/// dot product while the scale stays `sqrt(d_h)`. The attention weights are
/// left in `weights`.
pub fn attend<S: SlotStore + ?Sized>(
    q: &[f64],
    store: &S,
    exclude_dim0: bool,
    weights: &mut Vec<f64>,
    out: &mut [f64],
) -> Result<(), ModelError> {
    let l = store.len();
    if l == 0 {
        return Err(ModelError::EmptyCache);
    }
    let dh = q.len();
    let start = usize::from(exclude_dim0);
    let scale = 1.0 / (dh as f64).sqrt();
    let scores: Vec<f64> = (0..l)
        .map(|j| kernels::dot(&q[start..], &store.slot(j).0[start..]) * scale)
        .collect();
    weights.clear();
    weights.resize(l, 0.0);
    kernels::softmax_row(&scores, weights);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, p) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(store.slot(j).1) {
            *o += p * v;
        }
    }
    Ok(())
}

/// Per-sequence key/value state consulted by [`Model::decode_step`].
///
/// For each layer the model hands over the current token's queries
/// (`n_heads * d_h`), keys and values (`kv_heads * d_h`, positions already
/// applied); the cache stores what it needs and writes the attention output
/// for every query head into `out`.
pub trait KvCache {
    /// Tokens consumed so far.
    fn position(&self) -> usize;
    fn attend_layer(
        &mut self,
        layer: usize,
        q: &mut [f64],
        k: &mut [f64],
        v: &[f64],
        out: &mut [f64],
    ) -> Result<(), ModelError>;
    /// Called once after every layer has seen the current token.
    fn end_token(&mut self);
}

/// Uncompressed cache: one growing list of keys and values per layer and
/// key/value head.
#[derive(Debug, Clone)]
pub struct VanillaCache {
    heads: usize,
    kv_heads: usize,
    dh: usize,
    exclude_dim0: bool,
    dim0_factor: f64,
    layers: Vec<Vec<FlatSlots>>,
    position: usize,
    weights: Vec<f64>,
}

impl VanillaCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self::with_dim0(config, false, 1.0)
    }

    /// Cache that scales dimension 0 of queries and keys by `dim0_factor`
    /// and optionally leaves it out of the dot products.
    pub fn with_dim0(config: &ModelConfig, exclude_dim0: bool, dim0_factor: f64) -> Self {
        let dh = config.head_dim();
        Self {
            heads: config.n_heads,
            kv_heads: config.kv_heads(),
            dh,
            exclude_dim0,
            dim0_factor,
            layers: (0..config.n_layers)
                .map(|_| (0..config.kv_heads()).map(|_| FlatSlots::new(dh)).collect())
                .collect(),
            position: 0,
            weights: Vec::new(),
        }
    }

    pub fn store(&self, layer: usize, kv_head: usize) -> &FlatSlots {
        &self.layers[layer][kv_head]
    }

    /// `[layer][kv_head]` stored lengths.
    pub fn lengths(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.iter().map(SlotStore::len).collect()).collect()
    }
}

impl KvCache for VanillaCache {
    fn position(&self) -> usize {
        self.position
    }

    fn attend_layer(
        &mut self,
        layer: usize,
        q: &mut [f64],
        k: &mut [f64],
        v: &[f64],
        out: &mut [f64],
    ) -> Result<(), ModelError> {
        let dh = self.dh;
        if self.dim0_factor != 1.0 {
            q.chunks_mut(dh).for_each(|h| h[0] *= self.dim0_factor);
            k.chunks_mut(dh).for_each(|h| h[0] *= self.dim0_factor);
        }
        for j in 0..self.kv_heads {
            let r = j * dh..(j + 1) * dh;
            self.layers[layer][j].append(&k[r.clone()], &v[r], 0.0)?;
        }
        let group = self.heads / self.kv_heads;
        for h in 0..self.heads {
            let r = h * dh..(h + 1) * dh;
            attend(&q[r.clone()], &self.layers[layer][h / group], self.exclude_dim0, &mut self.weights, &mut out[r])?;
        }
        Ok(())
    }

    fn end_token(&mut self) {
        self.position += 1;
    }
}

impl Model {
    /// Processes one token against `cache` and returns next-token logits.
    pub fn decode_step(&self, token: usize, cache: &mut dyn KvCache) -> Result<Vec<f64>, ModelError> {
        self.decode_inner(token, cache, None)
    }

    /// Like [`Model::decode_step`], also returning each layer's attention
    /// output before `W_o`.
    pub fn decode_step_traced(
        &self,
        token: usize,
        cache: &mut dyn KvCache,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
        let mut attn = Vec::with_capacity(self.config.n_layers);
        let logits = self.decode_inner(token, cache, Some(&mut attn))?;
        Ok((logits, attn))
    }

    /// Decodes `tokens` one at a time, returning the logits after each.
    pub fn decode_sequence(&self, tokens: &[usize], cache: &mut dyn KvCache) -> Result<Vec<Vec<f64>>, ModelError> {
        tokens.iter().map(|&t| self.decode_step(t, cache)).collect()
    }

    fn decode_inner(
        &self,
        token: usize,
        cache: &mut dyn KvCache,
        mut attn: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Vec<f64>, ModelError> {
        let c = &self.config;
        let pos = cache.position();
        if pos >= c.max_seq {
            return Err(ModelError::Capacity { max: c.max_seq });
        }
        self.check_tokens(&[token])?;
        let (d, dh, kvw) = (c.d_model, c.head_dim(), c.kv_heads() * c.head_dim());
        let w = &self.weights;
        let mut x = w.tok_emb.row(token).to_vec();
        if let Some(pe) = &w.pos_emb {
            x.iter_mut().zip(pe.row(pos)).for_each(|(a, b)| *a += b);
        }
        let mut hn = vec![0.0; d];
        let (mut q, mut k, mut v) = (vec![0.0; d], vec![0.0; kvw], vec![0.0; kvw]);
        let mut o = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let f = c.ffn_hidden();
        let (mut a, mut b) = (vec![0.0; f], vec![0.0; f]);
        for (l, lw) in w.layers.iter().enumerate() {
            kernels::rms_norm_row(&x, lw.attn_norm.data(), c.norm_eps, &mut hn);
            self.project_qkv(l, &hn, &mut q, &mut k, &mut v);
            if c.position_scheme == PositionScheme::RotaryPreCache {
                q.chunks_mut(dh).for_each(|h| kernels::rope_head(h, pos, c.rope_base, false));
                k.chunks_mut(dh).for_each(|h| kernels::rope_head(h, pos, c.rope_base, false));
            }
            cache.attend_layer(l, &mut q, &mut k, &v, &mut o)?;
            if let Some(attn) = attn.as_deref_mut() {
                attn.push(o.clone());
            }
            vec_mat(&o, lw.wo.data(), d, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            kernels::rms_norm_row(&x, lw.ffn_norm.data(), c.norm_eps, &mut hn);
            vec_mat(&hn, lw.w1.data(), f, &mut a);
            vec_mat(&hn, lw.w3.data(), f, &mut b);
            a.iter_mut().zip(&b).for_each(|(a, b)| *a = kernels::silu(*a) * b);
            vec_mat(&a, lw.w2.data(), d, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        cache.end_token();
        kernels::rms_norm_row(&x, w.final_norm.data(), c.norm_eps, &mut hn);
        let mut logits = vec![0.0; c.vocab_size];
        vec_mat(&hn, w.lm_head.data(), c.vocab_size, &mut logits);
        Ok(logits)
    }
}
