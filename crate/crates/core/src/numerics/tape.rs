//! Recorded reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node holding its output value. [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates gradients into
//! each input's slot, so the summation order (and therefore every bit of
//! every gradient) is fixed by the order in which ops were recorded.

use super::kernels::{self, gemm, gemm_view, MatView};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Silu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    SoftmaxMasked {
        logits: Var,
        mask: Var,
    },
    HeadProject {
        x: Var,
        w: Var,
    },
    Rope {
        x: Var,
        heads: usize,
        offset: usize,
        base: f64,
    },
    SelectDim0 {
        x: Var,
        heads: usize,
    },
    ScaleDim0 {
        x: Var,
        heads: usize,
        factor: f64,
    },
    HeadMean(Var),
    Accumulate {
        x: Var,
        alpha: Var,
        omega: Var,
        heads: usize,
        window: usize,
    },
    DmcMask(Var),
    HeadScores {
        q: Var,
        k: Var,
        heads: usize,
        kv_heads: usize,
        skip_dim0: bool,
        scale: f64,
    },
    HeadMix {
        p: Var,
        v: Var,
        heads: usize,
        kv_heads: usize,
    },
    CrLoss {
        alphas: Vec<Var>,
    },
    HeadConsistency(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer operation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    all_masked_rows: usize,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, t: &Tensor, expected: usize) -> NumericsError {
    NumericsError::Rank {
        op,
        shape: t.shape().to_vec(),
        expected,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of softmax rows seen so far whose entries were all masked.
    /// A correct DMC mask never produces one.
    pub fn all_masked_rows(&self) -> usize {
        self.all_masked_rows
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient written by the last [`Tape::backward`] call, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::ops::matmul(self.val(a), self.val(b))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(a);
        Tensor::new(t.shape(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::log_sigmoid);
        self.push(out, Op::LogSigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::silu);
        self.push(out, Op::Silu(a), &[a])
    }

    /// `max(x, floor)` elementwise; the gradient is cut where clamped.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.map(a, |x| x.max(floor));
        self.push(out, Op::ClampMin(a, floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Row-wise RMS normalization of `x: [n, d]` scaled by `gain: [d]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, NumericsError> {
        let (tx, tg) = (self.val(x), self.val(gain));
        if tx.rank() != 2 || tg.shape() != [tx.shape()[1]] {
            return Err(shape_err("rms_norm", tx, tg));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            kernels::rms_norm_row(tx.row(i), tg.data(), eps, &mut out[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[n, d], out)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    /// Gathers rows of `table: [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.val(table);
        if t.rank() != 2 {
            return Err(rank_err("embedding", t, 2));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::Index {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean next-token negative log-likelihood of `targets` under
    /// `logits: [n, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let loss = super::ops::cross_entropy_lm(self.val(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Softmax over the last axis of `logits + mask`; see
    /// [`ops::softmax_masked`](super::ops::softmax_masked).
    pub fn softmax_masked(&mut self, logits: Var, mask: Var) -> Result<Var, NumericsError> {
        let (out, flagged) = super::ops::softmax_masked(self.val(logits), self.val(mask))?;
        self.all_masked_rows += flagged;
        Ok(self.push(out, Op::SoftmaxMasked { logits, mask }, &[logits, mask]))
    }

    /// Block-diagonal projection. `x: [n, H*s]`, `w: [H, s, o]`; block `h`
    /// of the output is `x[:, h*s..(h+1)*s] . w[h]`.
    pub fn head_project(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (tx, tw) = (self.val(x), self.val(w));
        if tx.rank() != 2 || tw.rank() != 3 || tx.shape()[1] != tw.shape()[0] * tw.shape()[1] {
            return Err(shape_err("head_project", tx, tw));
        }
        let n = tx.shape()[0];
        let (heads, s, o) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        let mut out = vec![0.0; n * heads * o];
        for h in 0..heads {
            gemm_view(
                n,
                s,
                o,
                MatView::cols(tx.data(), heads * s, h * s),
                MatView {
                    data: tw.data(),
                    offset: h * s * o,
                    row_stride: o,
                    col_stride: 1,
                },
                0.0,
                &mut out,
                h * o,
                heads * o,
            );
        }
        let out = Tensor::new(&[n, heads * o], out)?;
        Ok(self.push(out, Op::HeadProject { x, w }, &[x, w]))
    }

    /// Rotary position encoding applied per head; row `i` is at position
    /// `offset + i`.
    pub fn rope(&mut self, x: Var, heads: usize, offset: usize, base: f64) -> Result<Var, NumericsError> {
        let mut out = self.val(x).clone();
        out.grad = None;
        let width = check_heads("rope", &out, heads)?;
        let dh = width / heads;
        let n = out.shape()[0];
        for i in 0..n {
            for h in 0..heads {
                let start = i * width + h * dh;
                kernels::rope_head(&mut out.data_mut()[start..start + dh], offset + i, base, false);
            }
        }
        Ok(self.push(
            out,
            Op::Rope {
                x,
                heads,
                offset,
                base,
            },
            &[x],
        ))
    }

    /// Dimension 0 of every head, transposed: `[n, H*dh] -> [H, n]`.
    pub fn select_dim0(&mut self, x: Var, heads: usize) -> Result<Var, NumericsError> {
        let t = self.val(x);
        let width = check_heads("select_dim0", t, heads)?;
        let dh = width / heads;
        let n = t.shape()[0];
        let out = Tensor::from_fn(&[heads, n], |idx| {
            let (h, i) = (idx / n, idx % n);
            t.data()[i * width + h * dh]
        });
        Ok(self.push(out, Op::SelectDim0 { x, heads }, &[x]))
    }

    /// Multiplies dimension 0 of every head by `factor`.
    pub fn scale_dim0(&mut self, x: Var, heads: usize, factor: f64) -> Result<Var, NumericsError> {
        let mut out = self.val(x).clone();
        out.grad = None;
        let width = check_heads("scale_dim0", &out, heads)?;
        let dh = width / heads;
        let n = out.shape()[0];
        for i in 0..n {
            for h in 0..heads {
                out.data_mut()[i * width + h * dh] *= factor;
            }
        }
        Ok(self.push(out, Op::ScaleDim0 { x, heads, factor }, &[x]))
    }

    /// Replaces every row of `x: [H, n]` with the mean row.
    pub fn head_mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.val(x);
        if t.rank() != 2 {
            return Err(rank_err("head_mean", t, 2));
        }
        let (heads, n) = (t.shape()[0], t.shape()[1]);
        let mut mean = vec![0.0; n];
        for h in 0..heads {
            for (m, v) in mean.iter_mut().zip(t.row(h)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= heads as f64);
        let out = Tensor::from_fn(&[heads, n], |idx| mean[idx % n]);
        Ok(self.push(out, Op::HeadMean(x), &[x]))
    }

    /// Windowed partial accumulation of `x: [n, H*dh]` under relaxed
    /// decisions `alpha, omega: [H, n]`. Position `i` of head `h` runs the
    /// weighted running-average recurrence from `max(0, i + 1 - window)`
    /// up to `i`, restarting the segment at the window start.
    pub fn accumulate(
        &mut self,
        x: Var,
        alpha: Var,
        omega: Var,
        heads: usize,
        window: usize,
    ) -> Result<Var, NumericsError> {
        let (tx, ta, tw) = (self.val(x), self.val(alpha), self.val(omega));
        let width = check_heads("accumulate", tx, heads)?;
        let n = tx.shape()[0];
        if ta.shape() != [heads, n] {
            return Err(shape_err("accumulate", tx, ta));
        }
        if tw.shape() != [heads, n] {
            return Err(shape_err("accumulate", tx, tw));
        }
        if window == 0 {
            return Err(NumericsError::Domain {
                op: "accumulate",
                detail: "window must be at least 1".into(),
            });
        }
        let out = accumulate_forward(tx.data(), ta.data(), tw.data(), n, heads, width / heads, window);
        let out = Tensor::new(&[n, width], out)?;
        Ok(self.push(
            out,
            Op::Accumulate {
                x,
                alpha,
                omega,
                heads,
                window,
            },
            &[x, alpha, omega],
        ))
    }

    /// Additive DMC attention mask `[H, n, n]` from relaxed decision
    /// logits `[H, n]`: `log(1 - alpha[j+1])` below the diagonal, computed
    /// as `log_sigmoid(-logit[j+1])`; 0 on it; `-inf` above it.
    pub fn dmc_mask(&mut self, logits: Var) -> Result<Var, NumericsError> {
        let t = self.val(logits);
        if t.rank() != 2 {
            return Err(rank_err("dmc_mask", t, 2));
        }
        let (heads, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![f64::NEG_INFINITY; heads * n * n];
        for h in 0..heads {
            let row = t.row(h);
            for i in 0..n {
                let base = (h * n + i) * n;
                for j in 0..i {
                    out[base + j] = kernels::log_sigmoid(-row[j + 1]);
                }
                out[base + i] = 0.0;
            }
        }
        let out = Tensor::new(&[heads, n, n], out)?;
        Ok(self.push(out, Op::DmcMask(logits), &[logits]))
    }

    /// Scaled query-key dot products per head: `[H, n, n]`. Query head `h`
    /// reads key head `h / (H / kv_heads)`. With `skip_dim0`, dimension 0
    /// is left out of every dot product.
    pub fn head_scores(
        &mut self,
        q: Var,
        k: Var,
        heads: usize,
        kv_heads: usize,
        skip_dim0: bool,
        scale: f64,
    ) -> Result<Var, NumericsError> {
        let (tq, tk) = (self.val(q), self.val(k));
        let qw = check_heads("head_scores", tq, heads)?;
        let kw = check_heads("head_scores", tk, kv_heads)?;
        let dh = qw / heads;
        if kw / kv_heads != dh || tq.shape()[0] != tk.shape()[0] || heads % kv_heads != 0 {
            return Err(shape_err("head_scores", tq, tk));
        }
        let n = tq.shape()[0];
        let group = heads / kv_heads;
        let start = usize::from(skip_dim0);
        let mut out = vec![0.0; heads * n * n];
        for h in 0..heads {
            let g = h / group;
            gemm_view(
                n,
                dh - start,
                n,
                MatView::cols(tq.data(), qw, h * dh + start),
                MatView::cols(tk.data(), kw, g * dh + start).t(),
                0.0,
                &mut out,
                h * n * n,
                n,
            );
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let out = Tensor::new(&[heads, n, n], out)?;
        Ok(self.push(
            out,
            Op::HeadScores {
                q,
                k,
                heads,
                kv_heads,
                skip_dim0,
                scale,
            },
            &[q, k],
        ))
    }

    /// Attention-weighted values: `p: [H, n, n]`, `v: [n, KV*dh]` ->
    /// `[n, H*dh]`.
    pub fn head_mix(&mut self, p: Var, v: Var, heads: usize, kv_heads: usize) -> Result<Var, NumericsError> {
        let (tp, tv) = (self.val(p), self.val(v));
        let vw = check_heads("head_mix", tv, kv_heads)?;
        let n = tv.shape()[0];
        if tp.shape() != [heads, n, n] || heads % kv_heads != 0 {
            return Err(shape_err("head_mix", tp, tv));
        }
        let dh = vw / kv_heads;
        let group = heads / kv_heads;
        let mut out = vec![0.0; n * heads * dh];
        for h in 0..heads {
            let g = h / group;
            gemm_view(
                n,
                n,
                dh,
                MatView {
                    data: tp.data(),
                    offset: h * n * n,
                    row_stride: n,
                    col_stride: 1,
                },
                MatView::cols(tv.data(), vw, g * dh),
                0.0,
                &mut out,
                h * dh,
                heads * dh,
            );
        }
        let out = Tensor::new(&[n, heads * dh], out)?;
        Ok(self.push(out, Op::HeadMix { p, v, heads, kv_heads }, &[p, v]))
    }

    /// One-sided compression loss over every decision tensor in `alphas`:
    /// `max(0, sum(1 - alpha) - N / target_cr) / N`.
    pub fn cr_loss(&mut self, alphas: &[Var], target_cr: f64) -> Var {
        let values: Vec<&[f64]> = alphas.iter().map(|a| self.val(*a).data()).collect();
        let loss = crate::dmc::training::cr_loss_value(&values, target_cr);
        self.push(
            Tensor::scalar(loss),
            Op::CrLoss {
                alphas: alphas.to_vec(),
            },
            alphas,
        )
    }

    /// Head-consistency loss; one `[H, n]` tensor per layer.
    pub fn head_consistency(&mut self, alphas: &[Var]) -> Result<Var, NumericsError> {
        let mut views = Vec::with_capacity(alphas.len());
        for a in alphas {
            let t = self.val(*a);
            if t.rank() != 2 {
                return Err(rank_err("head_consistency", t, 2));
            }
            views.push((t.shape()[0], t.shape()[1], t.data()));
        }
        let loss = crate::dmc::training::head_consistency_value(&views);
        Ok(self.push(Tensor::scalar(loss), Op::HeadConsistency(alphas.to_vec()), alphas))
    }

    /// Backpropagates from `root`, seeding its gradient with ones. Gradients
    /// from any earlier call are discarded first.
    pub fn backward(&mut self, root: Var) {
        let count = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for idx in (0..count).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.requires_grad { g } else { None };
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(tb) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(ta) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, g, *s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, g, 1.0);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, gi), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let x = self.val(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, gi), x) in d.iter_mut().zip(g).zip(x) {
                        *d += gi * kernels::sigmoid(-x);
                    }
                }
            }
            Op::Silu(a) => {
                let x = self.val(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, gi), x) in d.iter_mut().zip(g).zip(x) {
                        let s = kernels::sigmoid(*x);
                        *d += gi * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let x = self.val(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, gi), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > *floor {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::RmsNorm { x, gain, eps } => self.rms_norm_backward(*x, *gain, *eps, g, grads),
            Op::Embedding { table, ids } => {
                let d = self.val(*table).shape()[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.val(*logits);
                let (n, vocab) = (t.shape()[0], t.shape()[1]);
                if let Some(d) = self.slot(grads, *logits) {
                    let mut probs = vec![0.0; vocab];
                    let coef = g[0] / n as f64;
                    for (i, &target) in targets.iter().enumerate() {
                        kernels::softmax_row(t.row(i), &mut probs);
                        probs[target] -= 1.0;
                        axpy(&mut d[i * vocab..(i + 1) * vocab], &probs, coef);
                    }
                }
            }
            Op::SoftmaxMasked { logits, mask } => {
                let cols = *out.shape().last().expect("rank >= 1");
                let mut dl = vec![0.0; out.len()];
                for (r, (p, gr)) in out.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let inner = kernels::dot(p, gr);
                    for c in 0..cols {
                        dl[r * cols + c] = p[c] * (gr[c] - inner);
                    }
                }
                for v in [logits, mask] {
                    if let Some(d) = self.slot(grads, *v) {
                        axpy(d, &dl, 1.0);
                    }
                }
            }
            Op::HeadProject { x, w } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let n = tx.shape()[0];
                let (heads, s, o) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                if let Some(dx) = self.slot(grads, *x) {
                    for h in 0..heads {
                        let wv = MatView {
                            data: tw.data(),
                            offset: h * s * o,
                            row_stride: o,
                            col_stride: 1,
                        };
                        gemm_view(n, o, s, MatView::cols(g, heads * o, h * o), wv.t(), 1.0, dx, h * s, heads * s);
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    for h in 0..heads {
                        gemm_view(
                            s,
                            n,
                            o,
                            MatView::cols(tx.data(), heads * s, h * s).t(),
                            MatView::cols(g, heads * o, h * o),
                            1.0,
                            dw,
                            h * s * o,
                            o,
                        );
                    }
                }
            }
            Op::Rope { x, heads, offset, base } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let width = out.shape()[1];
                    let dh = width / heads;
                    let mut buf = vec![0.0; dh];
                    for (i, row) in g.chunks(width).enumerate() {
                        for h in 0..*heads {
                            buf.copy_from_slice(&row[h * dh..(h + 1) * dh]);
                            kernels::rope_head(&mut buf, offset + i, *base, true);
                            axpy(&mut dx[i * width + h * dh..i * width + (h + 1) * dh], &buf, 1.0);
                        }
                    }
                }
            }
            Op::SelectDim0 { x, heads } => {
                let width = self.val(*x).shape()[1];
                let n = out.shape()[1];
                let dh = width / heads;
                if let Some(dx) = self.slot(grads, *x) {
                    for h in 0..*heads {
                        for i in 0..n {
                            dx[i * width + h * dh] += g[h * n + i];
                        }
                    }
                }
            }
            Op::ScaleDim0 { x, heads, factor } => {
                let width = out.shape()[1];
                let dh = width / heads;
                if let Some(dx) = self.slot(grads, *x) {
                    for (c, (d, gi)) in dx.iter_mut().zip(g).enumerate() {
                        let f = if (c % width) % dh == 0 { *factor } else { 1.0 };
                        *d += gi * f;
                    }
                }
            }
            Op::HeadMean(x) => {
                let (heads, n) = (out.shape()[0], out.shape()[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    let mut col = vec![0.0; n];
                    for h in 0..heads {
                        axpy(&mut col, &g[h * n..(h + 1) * n], 1.0);
                    }
                    for h in 0..heads {
                        axpy(&mut dx[h * n..(h + 1) * n], &col, 1.0 / heads as f64);
                    }
                }
            }
            Op::Accumulate {
                x,
                alpha,
                omega,
                heads,
                window,
            } => self.accumulate_backward(*x, *alpha, *omega, *heads, *window, g, grads),
            Op::DmcMask(logits) => {
                let t = self.val(*logits);
                let (heads, n) = (t.shape()[0], t.shape()[1]);
                if let Some(dl) = self.slot(grads, *logits) {
                    for h in 0..heads {
                        for j in 0..n.saturating_sub(1) {
                            let mut col = 0.0;
                            for i in j + 1..n {
                                col += g[(h * n + i) * n + j];
                            }
                            // d/dx log_sigmoid(-x) = -sigmoid(x)
                            dl[h * n + j + 1] -= col * kernels::sigmoid(t.data()[h * n + j + 1]);
                        }
                    }
                }
            }
            Op::HeadScores {
                q,
                k,
                heads,
                kv_heads,
                skip_dim0,
                scale,
            } => {
                let (tq, tk) = (self.val(*q), self.val(*k));
                let n = tq.shape()[0];
                let (qw, kw) = (tq.shape()[1], tk.shape()[1]);
                let dh = qw / heads;
                let group = heads / kv_heads;
                let start = usize::from(*skip_dim0);
                let gs: Vec<f64> = g.iter().map(|v| v * scale).collect();
                if let Some(dq) = self.slot(grads, *q) {
                    for h in 0..*heads {
                        let gv = MatView {
                            data: &gs,
                            offset: h * n * n,
                            row_stride: n,
                            col_stride: 1,
                        };
                        let kv = MatView::cols(tk.data(), kw, (h / group) * dh + start);
                        gemm_view(n, n, dh - start, gv, kv, 1.0, dq, h * dh + start, qw);
                    }
                }
                if let Some(dk) = self.slot(grads, *k) {
                    for h in 0..*heads {
                        let gv = MatView {
                            data: &gs,
                            offset: h * n * n,
                            row_stride: n,
                            col_stride: 1,
                        };
                        let qv = MatView::cols(tq.data(), qw, h * dh + start);
                        gemm_view(n, n, dh - start, gv.t(), qv, 1.0, dk, (h / group) * dh + start, kw);
                    }
                }
            }
            Op::HeadMix { p, v, heads, kv_heads } => {
                let (tp, tv) = (self.val(*p), self.val(*v));
                let n = tv.shape()[0];
                let vw = tv.shape()[1];
                let dh = vw / kv_heads;
                let group = heads / kv_heads;
                let ow = heads * dh;
                if let Some(dp) = self.slot(grads, *p) {
                    for h in 0..*heads {
                        gemm_view(
                            n,
                            dh,
                            n,
                            MatView::cols(g, ow, h * dh),
                            MatView::cols(tv.data(), vw, (h / group) * dh).t(),
                            1.0,
                            dp,
                            h * n * n,
                            n,
                        );
                    }
                }
                if let Some(dv) = self.slot(grads, *v) {
                    for h in 0..*heads {
                        let pv = MatView {
                            data: tp.data(),
                            offset: h * n * n,
                            row_stride: n,
                            col_stride: 1,
                        };
                        gemm_view(n, n, dh, pv.t(), MatView::cols(g, ow, h * dh), 1.0, dv, (h / group) * dh, vw);
                    }
                }
            }
            Op::CrLoss { alphas, .. } => {
                let total: usize = alphas.iter().map(|a| self.val(*a).len()).sum();
                // One-sided: strictly positive loss means the budget is exceeded.
                if out.item() > 0.0 {
                    let coef = -g[0] / total as f64;
                    for a in alphas {
                        if let Some(d) = self.slot(grads, *a) {
                            d.iter_mut().for_each(|d| *d += coef);
                        }
                    }
                }
            }
            Op::HeadConsistency(alphas) => {
                let total: usize = alphas.iter().map(|a| self.val(*a).len()).sum();
                let coef = g[0] / total as f64;
                for a in alphas {
                    let t = self.val(*a);
                    let (heads, n) = (t.shape()[0], t.shape()[1]);
                    let mut local = vec![0.0; heads * n];
                    for step in 0..n {
                        let mean = (0..heads).map(|h| t.data()[h * n + step]).sum::<f64>() / heads as f64;
                        let signs: Vec<f64> = (0..heads).map(|h| sign(t.data()[h * n + step] - mean)).collect();
                        let sign_total: f64 = signs.iter().sum();
                        for h in 0..heads {
                            local[h * n + step] = coef * (signs[h] - sign_total / heads as f64);
                        }
                    }
                    if let Some(d) = self.slot(grads, *a) {
                        axpy(d, &local, 1.0);
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, created on first use; `None` if `v` does
    /// not take gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn rms_norm_backward(&self, x: Var, gain: Var, eps: f64, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tx, tg) = (self.val(x), self.val(gain));
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut dx_all = vec![0.0; n * d];
        let mut dg_all = vec![0.0; d];
        for i in 0..n {
            let row = tx.row(i);
            let gr = &g[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            let mut inner = 0.0;
            for j in 0..d {
                dg_all[j] += gr[j] * row[j] * inv;
                inner += gr[j] * tg.data()[j] * row[j];
            }
            let coef = inv * inv * inv * inner / d as f64;
            for j in 0..d {
                dx_all[i * d + j] = inv * gr[j] * tg.data()[j] - row[j] * coef;
            }
        }
        if let Some(dx) = self.slot(grads, x) {
            axpy(dx, &dx_all, 1.0);
        }
        if let Some(dg) = self.slot(grads, gain) {
            axpy(dg, &dg_all, 1.0);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate_backward(
        &self,
        x: Var,
        alpha: Var,
        omega: Var,
        heads: usize,
        window: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tx, ta, tw) = (self.val(x), self.val(alpha), self.val(omega));
        let n = tx.shape()[0];
        let width = tx.shape()[1];
        let dh = width / heads;
        let mut dx = vec![0.0; n * width];
        let mut da = vec![0.0; heads * n];
        let mut dw = vec![0.0; heads * n];
        let xd = tx.data();
        let mut zs = Vec::with_capacity(window);
        let mut accs = Vec::with_capacity(window * dh);
        let mut ga = vec![0.0; dh];
        let mut d_num = vec![0.0; dh];
        for h in 0..heads {
            let al = ta.row(h);
            let om = tw.row(h);
            let col = h * dh;
            for i in 0..n {
                let gi = &g[i * width + col..i * width + col + dh];
                if gi.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let s = (i + 1).saturating_sub(window);
                // Replay the chain s..=i, keeping every intermediate state.
                zs.clear();
                accs.clear();
                zs.push(om[s]);
                accs.extend_from_slice(&xd[s * width + col..s * width + col + dh]);
                for t in s + 1..=i {
                    let z_prev = zs[t - s - 1];
                    let z = z_prev * al[t] + om[t];
                    let prev = (t - s - 1) * dh;
                    for c in 0..dh {
                        let v = (al[t] * accs[prev + c] * z_prev + xd[t * width + col + c] * om[t]) / z;
                        accs.push(v);
                    }
                    zs.push(z);
                }
                ga.copy_from_slice(gi);
                let mut gz = 0.0;
                for t in (s + 1..=i).rev() {
                    let k = t - s;
                    let z = zs[k];
                    let z_prev = zs[k - 1];
                    let cur = &accs[k * dh..(k + 1) * dh];
                    let prev = &accs[(k - 1) * dh..k * dh];
                    let xt = &xd[t * width + col..t * width + col + dh];
                    let mut ga_dot_cur = 0.0;
                    for c in 0..dh {
                        d_num[c] = ga[c] / z;
                        ga_dot_cur += ga[c] * cur[c];
                    }
                    let gz_total = gz - ga_dot_cur / z;
                    let prev_dot = kernels::dot(prev, &d_num);
                    let x_dot = kernels::dot(xt, &d_num);
                    da[h * n + t] += z_prev * prev_dot + z_prev * gz_total;
                    dw[h * n + t] += x_dot + gz_total;
                    for c in 0..dh {
                        dx[t * width + col + c] += om[t] * d_num[c];
                    }
                    gz = al[t] * prev_dot + al[t] * gz_total;
                    for c in 0..dh {
                        ga[c] = al[t] * z_prev * d_num[c];
                    }
                }
                for c in 0..dh {
                    dx[s * width + col + c] += ga[c];
                }
                dw[h * n + s] += gz;
            }
        }
        if let Some(d) = self.slot(grads, x) {
            axpy(d, &dx, 1.0);
        }
        if let Some(d) = self.slot(grads, alpha) {
            axpy(d, &da, 1.0);
        }
        if let Some(d) = self.slot(grads, omega) {
            axpy(d, &dw, 1.0);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn check_heads(op: &'static str, t: &Tensor, heads: usize) -> Result<usize, NumericsError> {
    if t.rank() != 2 {
        return Err(rank_err(op, t, 2));
    }
    let width = t.shape()[1];
    if heads == 0 || width % heads != 0 {
        return Err(NumericsError::Domain {
            op,
            detail: format!("width {width} is not divisible into {heads} heads"),
        });
    }
    Ok(width)
}

/// Shared forward kernel for [`Tape::accumulate`] and the eager
/// accumulation functions. Positions whose window reaches back to 0 reuse
/// one running prefix pass, which performs exactly the same floating-point
/// operations as replaying the chain from 0.
pub(crate) fn accumulate_forward(
    x: &[f64],
    alpha: &[f64],
    omega: &[f64],
    n: usize,
    heads: usize,
    dh: usize,
    window: usize,
) -> Vec<f64> {
    let width = heads * dh;
    let mut out = vec![0.0; n * width];
    let mut acc = vec![0.0; dh];
    for h in 0..heads {
        let al = &alpha[h * n..(h + 1) * n];
        let om = &omega[h * n..(h + 1) * n];
        let col = h * dh;
        // prefix pass, valid for i < window
        let mut z = 0.0;
        for i in 0..n.min(window) {
            let xi = &x[i * width + col..i * width + col + dh];
            if i == 0 {
                z = om[0];
                acc.copy_from_slice(xi);
            } else {
                let z_new = z * al[i] + om[i];
                for c in 0..dh {
                    acc[c] = (al[i] * acc[c] * z + xi[c] * om[i]) / z_new;
                }
                z = z_new;
            }
            out[i * width + col..i * width + col + dh].copy_from_slice(&acc);
        }
        for i in window..n {
            let s = i + 1 - window;
            let mut z = om[s];
            acc.copy_from_slice(&x[s * width + col..s * width + col + dh]);
            for t in s + 1..=i {
                let xt = &x[t * width + col..t * width + col + dh];
                let z_new = z * al[t] + om[t];
                for c in 0..dh {
                    acc[c] = (al[t] * acc[c] * z + xt[c] * om[t]) / z_new;
                }
                z = z_new;
            }
            out[i * width + col..i * width + col + dh].copy_from_slice(&acc);
        }
    }
    out
}
