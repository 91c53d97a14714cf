use crate::dmc::training::{dmc_mask_from_alpha, GumbelParams};
use crate::dmc::{DmcVariant, OMEGA_FLOOR};
use crate::numerics::{kernels, Tape, Tensor, Var};

use super::{Model, ModelError, ModelWeights, PositionScheme};

/// Tape variables for every model weight.
#[derive(Debug, Clone)]
pub struct ParamVars {
    /// All variables in [`ModelWeights::named`] order.
    pub all: Vec<Var>,
    tok_emb: Var,
    pos_emb: Option<Var>,
    layers: Vec<LayerVars>,
    final_norm: Var,
    lm_head: Var,
}

#[derive(Debug, Clone, Copy)]
struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: Var,
    w1: Var,
    w3: Var,
    w2: Var,
}

impl ParamVars {
    /// Places every weight on `tape`, as parameters or as constants.
    pub fn register(tape: &mut Tape, weights: &ModelWeights, trainable: bool) -> Self {
        let all: Vec<Var> = weights
            .named()
            .into_iter()
            .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self::from_vars(weights, all)
    }

    /// Wraps variables already on a tape, given in [`ModelWeights::named`]
    /// order for a model shaped like `weights`.
    pub fn from_vars(weights: &ModelWeights, all: Vec<Var>) -> Self {
        assert_eq!(all.len(), weights.named().len(), "one variable per weight");
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("layout matches named()");
        let tok_emb = next();
        let pos_emb = weights.pos_emb.as_ref().map(|_| next());
        let layers = weights
            .layers
            .iter()
            .map(|_| LayerVars {
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
        let final_norm = next();
        let lm_head = next();
        Self {
            all,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
        }
    }

    /// Moves the gradients out of the tape, one per weight; weights that
    /// received no gradient get `None`.
    pub fn take_grads(&self, tape: &mut Tape) -> Vec<Option<Vec<f64>>> {
        self.all.iter().map(|v| tape.take_grad(*v)).collect()
    }
}

/// How compression decisions are produced in the differentiable forward.
#[derive(Debug, Clone, Copy)]
pub enum DecisionMode<'a> {
    /// Relaxed decisions `sigmoid((k0 - c + noise) / tau)`. `noise` holds
    /// one logistic sample per `(layer, head, t)` in that order; `None` is
    /// the zero-noise form.
    Relaxed { noise: Option<&'a [f64]> },
    /// Discrete decisions `round(sigmoid(k0 - c))`, exactly as decoded.
    Hard,
    /// Fixed decisions, one `[heads * n]` row-major slice per layer.
    Scripted(&'a [Vec<f64>]),
}

#[derive(Debug, Clone, Copy)]
pub struct DmcForward<'a> {
    pub gumbel: GumbelParams,
    /// Accumulation window; any value `>= n` gives the exact recurrence.
    pub window: usize,
    pub variant: DmcVariant,
    pub decisions: DecisionMode<'a>,
}

#[derive(Debug, Clone, Copy)]
pub enum AttentionMode<'a> {
    /// Plain causal attention. `dim0_factor` scales dimension 0 of every
    /// query and key; `exclude_dim0` drops it from the dot products.
    Vanilla { dim0_factor: f64, exclude_dim0: bool },
    /// Attention over accumulated intermediate states under the
    /// decision mask.
    Dmc(DmcForward<'a>),
}

impl AttentionMode<'_> {
    pub const STANDARD: AttentionMode<'static> = AttentionMode::Vanilla {
        dim0_factor: 1.0,
        exclude_dim0: false,
    };
    pub const DIM0_BLIND: AttentionMode<'static> = AttentionMode::Vanilla {
        dim0_factor: 1.0,
        exclude_dim0: true,
    };
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n, vocab]`.
    pub logits: Var,
    /// Per layer `[heads, n]` decisions; empty for vanilla attention.
    /// Position 0 is always 0 since the first token opens a segment.
    pub alphas: Vec<Var>,
    /// Per layer `[heads, n]` importance weights; empty for vanilla.
    pub omegas: Vec<Var>,
    /// Per layer `[n, heads * d_h]` attention outputs before `W_o`.
    pub attn: Vec<Var>,
}

fn causal_mask(heads: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[heads, n, n], |idx| {
        let (i, j) = ((idx / n) % n, idx % n);
        if j <= i {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

impl Model {
    /// Teacher-forced forward pass of one sequence on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        tokens: &[usize],
        mode: &AttentionMode<'_>,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(ModelError::Config("empty token sequence".into()));
        }
        let (h, kv, dh) = (c.n_heads, c.kv_heads(), c.head_dim());
        if matches!(mode, AttentionMode::Dmc(_)) && (kv != h || dh < 2) {
            return Err(ModelError::Config(
                "compression needs one key head per query head and head_dim >= 2".into(),
            ));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = tape.embedding(params.tok_emb, tokens)?;
        if let Some(pe) = params.pos_emb {
            let positions: Vec<usize> = (0..n).collect();
            let e = tape.embedding(pe, &positions)?;
            x = tape.add(x, e)?;
        }
        let causal = match mode {
            AttentionMode::Vanilla { .. } => Some(tape.constant(causal_mask(h, n))),
            AttentionMode::Dmc(_) => None,
        };
        let mut out = ForwardOutput {
            logits: x,
            alphas: Vec::new(),
            omegas: Vec::new(),
            attn: Vec::new(),
        };
        for (l, lv) in params.layers.iter().enumerate() {
            let hn = tape.rms_norm(x, lv.attn_norm, c.norm_eps)?;
            let mut q = tape.head_project(hn, lv.wq)?;
            let mut k = tape.head_project(hn, lv.wk)?;
            let v = tape.head_project(hn, lv.wv)?;
            if c.position_scheme == PositionScheme::RotaryPreCache {
                q = tape.rope(q, h, 0, c.rope_base)?;
                k = tape.rope(k, kv, 0, c.rope_base)?;
            }
            let o = match mode {
                AttentionMode::Vanilla {
                    dim0_factor,
                    exclude_dim0,
                } => {
                    if *dim0_factor != 1.0 {
                        q = tape.scale_dim0(q, h, *dim0_factor)?;
                        k = tape.scale_dim0(k, kv, *dim0_factor)?;
                    }
                    let s = tape.head_scores(q, k, h, kv, *exclude_dim0, scale)?;
                    let p = tape.softmax_masked(s, causal.expect("vanilla mask"))?;
                    tape.head_mix(p, v, h, kv)?
                }
                AttentionMode::Dmc(f) => {
                    let (o, alpha, omega) = self.dmc_attention(tape, l, q, k, v, n, f)?;
                    out.alphas.push(alpha);
                    out.omegas.push(omega);
                    o
                }
            };
            out.attn.push(o);
            let proj = tape.matmul(o, lv.wo)?;
            x = tape.add(x, proj)?;
            let hn = tape.rms_norm(x, lv.ffn_norm, c.norm_eps)?;
            let a = tape.matmul(hn, lv.w1)?;
            let a = tape.silu(a);
            let b = tape.matmul(hn, lv.w3)?;
            let gated = tape.mul(a, b)?;
            let ff = tape.matmul(gated, lv.w2)?;
            x = tape.add(x, ff)?;
        }
        let xn = tape.rms_norm(x, params.final_norm, c.norm_eps)?;
        out.logits = tape.matmul(xn, params.lm_head)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn dmc_attention(
        &self,
        tape: &mut Tape,
        layer: usize,
        q: Var,
        k: Var,
        v: Var,
        n: usize,
        f: &DmcForward<'_>,
    ) -> Result<(Var, Var, Var), ModelError> {
        let h = self.config.n_heads;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let shared = f.variant == DmcVariant::HardC;
        let mut kl = tape.select_dim0(k, h)?;
        let mut ql = tape.select_dim0(q, h)?;
        if shared {
            kl = tape.head_mean(kl)?;
            ql = tape.head_mean(ql)?;
        }
        let open_first = tape.constant(Tensor::from_fn(&[h, n], |i| if i % n == 0 { 0.0 } else { 1.0 }));
        let (alpha, mask) = match f.decisions {
            DecisionMode::Relaxed { noise } => {
                f.gumbel.validate()?;
                let mut u = tape.add_scalar(kl, -f.gumbel.c);
                if let Some(noise) = noise {
                    let per_layer = h * n;
                    let slice = noise.get(layer * per_layer..(layer + 1) * per_layer).ok_or_else(|| {
                        ModelError::Config(format!("noise of length {} is too short", noise.len()))
                    })?;
                    let nz = Tensor::from_fn(&[h, n], |i| if shared { slice[i % n] } else { slice[i] });
                    let nz = tape.constant(nz);
                    u = tape.add(u, nz)?;
                }
                let u = tape.scale(u, 1.0 / f.gumbel.tau);
                let a = tape.sigmoid(u);
                let a = tape.mul(a, open_first)?;
                let m = tape.dmc_mask(u)?;
                (a, m)
            }
            DecisionMode::Hard => {
                let c = f.gumbel.c;
                let logits = tape.value(kl).data();
                let alpha: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(i, x)| f64::from(i % n != 0 && kernels::sigmoid(x - c) >= 0.5))
                    .collect();
                self.discrete_decisions(tape, &alpha, n)?
            }
            DecisionMode::Scripted(all) => {
                let given = all
                    .get(layer)
                    .filter(|a| a.len() == h * n)
                    .ok_or_else(|| ModelError::Config(format!("scripted decisions missing for layer {layer}")))?;
                let alpha: Vec<f64> = given.iter().enumerate().map(|(i, a)| if i % n == 0 { 0.0 } else { *a }).collect();
                self.discrete_decisions(tape, &alpha, n)?
            }
        };
        let omega = if f.variant == DmcVariant::UniformOmega {
            tape.constant(Tensor::filled(&[h, n], 1.0))
        } else {
            let w = tape.sigmoid(ql);
            tape.clamp_min(w, OMEGA_FLOOR)
        };
        let kbar = tape.accumulate(k, alpha, omega, h, f.window)?;
        let vbar = tape.accumulate(v, alpha, omega, h, f.window)?;
        let s = tape.head_scores(q, kbar, h, h, true, scale)?;
        let p = tape.softmax_masked(s, mask)?;
        let o = tape.head_mix(p, vbar, h, h)?;
        Ok((o, alpha, omega))
    }

    fn discrete_decisions(&self, tape: &mut Tape, alpha: &[f64], n: usize) -> Result<(Var, Var), ModelError> {
        let h = self.config.n_heads;
        let mut mask = Vec::with_capacity(h * n * n);
        for row in alpha.chunks(n) {
            mask.extend_from_slice(dmc_mask_from_alpha(row, n)?.data());
        }
        let a = tape.constant(Tensor::new(&[h, n], alpha.to_vec())?);
        let m = tape.constant(Tensor::new(&[h, n, n], mask)?);
        Ok((a, m))
    }

    /// Teacher-forced logits `[n, vocab]` with standard attention.
    pub fn forward_lm(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        self.forward_eval(tokens, &AttentionMode::STANDARD)
    }

    /// Teacher-forced logits under any attention mode, without gradients.
    pub fn forward_eval(&self, tokens: &[usize], mode: &AttentionMode<'_>) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let params = ParamVars::register(&mut tape, &self.weights, false);
        let out = self.forward_tape(&mut tape, &params, tokens, mode)?;
        Ok(tape.value(out.logits).clone())
    }
}
