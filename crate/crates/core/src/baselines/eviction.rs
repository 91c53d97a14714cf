use log::warn;

use crate::dmc::inference::{FlatSlots, SlotStore};
use crate::model::{attend, KvCache, ModelConfig, ModelError};

use super::{BaselineError, EvictionPolicy};

/// Budget in tokens for a cache that keeps `1/cr` of what it has seen:
/// `floor((n + generated) / cr)`, never below 2.
pub fn eviction_budget(cr: f64, n: usize, generated: usize) -> Result<usize, BaselineError> {
    let b = raw_budget(cr, n, generated)?;
    if b < 2 {
        warn!("eviction budget {b} for cr={cr}, n={n} raised to 2");
    }
    Ok(b.max(2))
}

fn raw_budget(cr: f64, n: usize, generated: usize) -> Result<usize, BaselineError> {
    if !(cr >= 1.0 && cr.is_finite()) {
        return Err(BaselineError::Config(format!("compression ratio {cr} must be a finite value >= 1")));
    }
    Ok(((n + generated) as f64 / cr).floor() as usize)
}

/// Eviction bookkeeping for one layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionState {
    pub policy: EvictionPolicy,
    /// Tokens kept after each step.
    pub budget: usize,
    scores: Vec<f64>,
}

impl EvictionState {
    pub fn new(policy: EvictionPolicy, budget: usize) -> Self {
        Self {
            policy,
            budget,
            scores: Vec::new(),
        }
    }

    /// Cached tokens tracked.
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Accumulated attention per cached token, oldest first.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Registers a newly cached token.
    pub fn push(&mut self) {
        self.scores.push(0.0);
    }

    /// Most recent tokens protected from eviction: `ceil(budget / 2)`.
    pub fn window(&self) -> usize {
        self.budget.div_ceil(2)
    }

    /// Applies the policy to the newest query's attention row.
    pub fn observe(&mut self, row: &[f64]) -> Option<usize> {
        match self.policy {
            EvictionPolicy::H2o => h2o_evict(self, row),
            EvictionPolicy::Tova => tova_evict(self, row),
        }
    }

    fn remove(&mut self, i: usize) -> usize {
        self.scores.remove(i);
        i
    }
}

/// First index of the minimum; later equal values lose to earlier ones.
fn argmin(xs: &[f64]) -> Option<usize> {
    xs.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &x)| match best {
            Some((_, b)) if b <= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

/// Adds `row` to the accumulated scores; once over budget, evicts the
/// lowest-scoring token outside the recent window (oldest on ties). The
/// evicted token's score is dropped.
pub fn h2o_evict(state: &mut EvictionState, row: &[f64]) -> Option<usize> {
    assert_eq!(row.len(), state.len(), "attention row does not match the cache");
    state.scores.iter_mut().zip(row).for_each(|(s, r)| *s += r);
    if state.len() <= state.budget {
        return None;
    }
    let candidates = state.len().saturating_sub(state.window());
    argmin(&state.scores[..candidates]).map(|i| state.remove(i))
}

/// Once over budget, evicts the token with the smallest weight in `row`
/// (oldest on ties).
pub fn tova_evict(state: &mut EvictionState, row: &[f64]) -> Option<usize> {
    assert_eq!(row.len(), state.len(), "attention row does not match the cache");
    if state.len() <= state.budget {
        return None;
    }
    argmin(row).map(|i| state.remove(i))
}

/// How an [`EvictionCache`] sizes itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Fixed(usize),
    /// `floor(prompt_len / cr)` while reading the prompt, then growing with
    /// each generated token.
    Ratio { cr: f64, prompt_len: usize },
}

impl Budget {
    /// Budget after reading the token at `position`, and whether it was
    /// raised to the minimum of 2.
    pub fn at(&self, position: usize) -> Result<(usize, bool), BaselineError> {
        match *self {
            Budget::Fixed(b) => Ok((b.max(2), b < 2)),
            Budget::Ratio { cr, prompt_len } => {
                let generated = (position + 1).saturating_sub(prompt_len);
                let b = raw_budget(cr, prompt_len, generated)?;
                Ok((b.max(2), b < 2))
            }
        }
    }
}

/// Uncompressed cache that evicts one token per layer and key/value head
/// whenever it exceeds its budget. Attention for the current token is
/// computed before eviction, so the cache never holds more than the
/// budget between steps.
#[derive(Debug, Clone)]
pub struct EvictionCache {
    heads: usize,
    kv_heads: usize,
    dh: usize,
    budget: Budget,
    exclude_dim0: bool,
    layers: Vec<Vec<(FlatSlots, EvictionState)>>,
    position: usize,
    evictions: usize,
    warned: bool,
    weights: Vec<f64>,
    row: Vec<f64>,
}

impl EvictionCache {
    pub fn new(config: &ModelConfig, policy: EvictionPolicy, budget: Budget) -> Result<Self, BaselineError> {
        let (initial, _) = budget.at(0)?;
        let dh = config.head_dim();
        Ok(Self {
            heads: config.n_heads,
            kv_heads: config.kv_heads(),
            dh,
            budget,
            exclude_dim0: false,
            layers: (0..config.n_layers)
                .map(|_| {
                    (0..config.kv_heads())
                        .map(|_| (FlatSlots::new(dh), EvictionState::new(policy, initial)))
                        .collect()
                })
                .collect(),
            position: 0,
            evictions: 0,
            warned: false,
            weights: Vec::new(),
            row: Vec::new(),
        })
    }

    /// Leaves dimension 0 out of the attention scores, for models whose
    /// dimension 0 carries compression logits.
    pub fn with_dim0_excluded(mut self, exclude: bool) -> Self {
        self.exclude_dim0 = exclude;
        self
    }

    pub fn store(&self, layer: usize, kv_head: usize) -> &FlatSlots {
        &self.layers[layer][kv_head].0
    }

    pub fn state(&self, layer: usize, kv_head: usize) -> &EvictionState {
        &self.layers[layer][kv_head].1
    }

    /// `[layer][kv_head]` cached lengths.
    pub fn lengths(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.iter().map(|(s, _)| s.len()).collect()).collect()
    }

    /// Total evictions so far.
    pub fn evictions(&self) -> usize {
        self.evictions
    }
}

impl KvCache for EvictionCache {
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
        let (budget, clamped) = self.budget.at(self.position).map_err(|e| ModelError::Config(e.to_string()))?;
        if clamped && !self.warned {
            warn!("eviction budget raised to the minimum of 2 tokens");
            self.warned = true;
        }
        let dh = self.dh;
        let group = self.heads / self.kv_heads;
        for j in 0..self.kv_heads {
            let r = j * dh..(j + 1) * dh;
            let (store, state) = &mut self.layers[layer][j];
            store.append(&k[r.clone()], &v[r], 0.0)?;
            state.push();
            state.budget = budget;
            self.row.clear();
            self.row.resize(store.len(), 0.0);
            for h in j * group..(j + 1) * group {
                let rh = h * dh..(h + 1) * dh;
                attend(&q[rh.clone()], &*store, self.exclude_dim0, &mut self.weights, &mut out[rh])?;
                if group == 1 {
                    std::mem::swap(&mut self.row, &mut self.weights);
                } else {
                    self.row.iter_mut().zip(&self.weights).for_each(|(a, w)| *a += w / group as f64);
                }
            }
            if let Some(i) = state.observe(&self.row) {
                store.remove(i);
                self.evictions += 1;
            }
        }
        Ok(())
    }

    fn end_token(&mut self) {
        self.position += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_formula() {
        assert_eq!(eviction_budget(1.0, 256, 0).unwrap(), 256);
        assert_eq!(eviction_budget(4.0, 256, 0).unwrap(), 64);
        assert_eq!(eviction_budget(4.0, 256, 100).unwrap(), 89);
        assert_eq!(eviction_budget(8.0, 10, 0).unwrap(), 2);
        assert!(eviction_budget(0.5, 10, 0).is_err());
        assert!(eviction_budget(f64::NAN, 10, 0).is_err());
    }

    #[test]
    fn tova_scripted_row() {
        let mut s = EvictionState::new(EvictionPolicy::Tova, 3);
        (0..4).for_each(|_| s.push());
        assert_eq!(tova_evict(&mut s, &[0.1, 0.05, 0.5, 0.35]), Some(1));
        assert_eq!(s.len(), 3);
        let mut s = EvictionState::new(EvictionPolicy::Tova, 2);
        (0..3).for_each(|_| s.push());
        assert_eq!(tova_evict(&mut s, &[0.4, 0.2, 0.2][..]), Some(1));
    }

    #[test]
    fn h2o_protects_window_and_breaks_ties_oldest() {
        let mut s = EvictionState::new(EvictionPolicy::H2o, 4);
        (0..5).for_each(|_| s.push());
        // The two newest tokens have the lowest scores but are protected.
        assert_eq!(h2o_evict(&mut s, &[0.3, 0.3, 0.3, 0.05, 0.05]), Some(0));
        assert_eq!(s.scores(), &[0.3, 0.3, 0.05, 0.05]);
    }

    #[test]
    fn under_budget_only_accumulates() {
        let mut s = EvictionState::new(EvictionPolicy::H2o, 4);
        s.push();
        assert_eq!(h2o_evict(&mut s, &[1.0]), None);
        s.push();
        assert_eq!(h2o_evict(&mut s, &[0.25, 0.75]), None);
        assert_eq!(s.scores(), &[1.25, 0.75]);
    }
}
