//! Discrete append-or-accumulate cache updates at decode time.

use serde::{Deserialize, Serialize};

use crate::numerics::kernels;

use super::{DmcError, OMEGA_FLOOR};

/// Discrete decision for one token in one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionOutcome {
    /// `true` merges the token into the open segment.
    pub alpha: bool,
    /// Importance weight in `[0, 1]`.
    pub omega: f64,
}

/// Reads the decision from `k[0]` and the importance from `q[0]`, then
/// zeroes both. `decision_offset` is subtracted from `k[0]` before the
/// sigmoid; a model retrofitted with offset `c` decodes with the same `c`
/// so that its train-time and decode-time thresholds coincide. Rounding
/// ties (sigmoid exactly 0.5) resolve to merge.
pub fn extract_scores(q: &mut [f64], k: &mut [f64], decision_offset: f64) -> DecisionOutcome {
    let outcome = DecisionOutcome {
        alpha: kernels::sigmoid(k[0] - decision_offset) >= 0.5,
        omega: kernels::sigmoid(q[0]),
    };
    q[0] = 0.0;
    k[0] = 0.0;
    outcome
}

/// Storage for one head's compressed key/value sequence.
///
/// Implemented by the flat [`FlatSlots`] and by
/// [`PageTable`](crate::paging::PageTable).
pub trait SlotStore {
    fn head_dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Importance sum of the open (last) segment.
    fn z(&self) -> f64;
    /// Key and value at logical slot `i`.
    fn slot(&self, i: usize) -> (&[f64], &[f64]);
    fn append(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<(), DmcError>;
    fn overwrite_last(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<(), DmcError>;
}

/// Contiguous growable slot storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatSlots {
    dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    z: f64,
}

impl FlatSlots {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Removes slot `i`, shifting later slots down.
    pub fn remove(&mut self, i: usize) {
        let r = i * self.dim..(i + 1) * self.dim;
        self.keys.drain(r.clone());
        self.values.drain(r);
    }
}

impl SlotStore for FlatSlots {
    fn head_dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.keys.len().checked_div(self.dim).unwrap_or(0)
    }

    fn z(&self) -> f64 {
        self.z
    }

    fn slot(&self, i: usize) -> (&[f64], &[f64]) {
        let r = i * self.dim..(i + 1) * self.dim;
        (&self.keys[r.clone()], &self.values[r])
    }

    fn append(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<(), DmcError> {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.z = z;
        Ok(())
    }

    fn overwrite_last(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<(), DmcError> {
        let l = self.len();
        if l == 0 {
            return Err(DmcError::EmptyCache);
        }
        let r = (l - 1) * self.dim..l * self.dim;
        self.keys[r.clone()].copy_from_slice(key);
        self.values[r].copy_from_slice(value);
        self.z = z;
        Ok(())
    }
}

/// What an update did to the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Appended,
    Accumulated,
}

/// One head's compressed cache plus the count of raw tokens consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct DmcHeadCache<S = FlatSlots> {
    store: S,
    n_seen: usize,
    open_len: usize,
    window_cap: Option<usize>,
}

impl DmcHeadCache<FlatSlots> {
    pub fn new(dim: usize) -> Self {
        Self::with_store(FlatSlots::new(dim))
    }
}

impl<S: SlotStore> DmcHeadCache<S> {
    pub fn with_store(store: S) -> Self {
        Self {
            store,
            n_seen: 0,
            open_len: 0,
            window_cap: None,
        }
    }

    /// Forces an append whenever the open segment already holds `cap`
    /// tokens.
    pub fn with_window_cap(mut self, cap: Option<usize>) -> Self {
        self.window_cap = cap;
        self
    }

    pub fn set_window_cap(&mut self, cap: Option<usize>) {
        self.window_cap = cap;
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    /// Compressed length `l`.
    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn z(&self) -> f64 {
        self.store.z()
    }

    /// Applies one decision. An empty cache always appends, since the first
    /// token opens the first segment; importances are floored so the
    /// running sum stays positive.
    pub fn update(&mut self, decision: DecisionOutcome, key: &[f64], value: &[f64]) -> Result<UpdateKind, DmcError> {
        let dim = self.store.head_dim();
        if key.len() != dim || value.len() != dim {
            return Err(DmcError::Length(format!(
                "key/value of length {}/{} for head dim {dim}",
                key.len(),
                value.len()
            )));
        }
        let omega = decision.omega.max(OMEGA_FLOOR);
        let capped = self.window_cap.is_some_and(|cap| self.open_len >= cap);
        let kind = if decision.alpha && !self.store.is_empty() && !capped {
            let z_prev = self.store.z();
            let z = z_prev + omega;
            let (last_k, last_v) = self.store.slot(self.store.len() - 1);
            let new_k: Vec<f64> = last_k.iter().zip(key).map(|(l, k)| (l * z_prev + k * omega) / z).collect();
            let new_v: Vec<f64> = last_v.iter().zip(value).map(|(l, v)| (l * z_prev + v * omega) / z).collect();
            self.store.overwrite_last(&new_k, &new_v, z)?;
            self.open_len += 1;
            UpdateKind::Accumulated
        } else {
            self.store.append(key, value, omega)?;
            self.open_len = 1;
            UpdateKind::Appended
        };
        self.n_seen += 1;
        Ok(kind)
    }
}

/// Full single-head step: extracts scores from `q`, `k` (zeroing their
/// dimension 0) and updates the cache.
pub fn dmc_cache_update<S: SlotStore>(
    cache: &mut DmcHeadCache<S>,
    q: &mut [f64],
    k: &mut [f64],
    v: &[f64],
    decision_offset: f64,
) -> Result<(DecisionOutcome, UpdateKind), DmcError> {
    let outcome = extract_scores(q, k, decision_offset);
    let kind = cache.update(outcome, k, v)?;
    Ok((outcome, kind))
}

/// Compression ratios from per-(layer, head) compressed lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub n_seen: usize,
    /// `[layer][head]` compressed lengths.
    pub lengths: Vec<Vec<usize>>,
    /// `[layer][head]` ratios `n_seen / l`.
    pub per_head: Vec<Vec<f64>>,
    pub per_layer: Vec<f64>,
    pub global: f64,
}

/// `n_l * n_h * n_seen / sum(l)`, plus per-head and per-layer ratios.
pub fn compression_ratio(lengths: &[Vec<usize>], n_seen: usize) -> Result<CompressionReport, DmcError> {
    if n_seen == 0 {
        return Err(DmcError::Length("compression ratio needs at least one token".into()));
    }
    let mut total_len = 0usize;
    let mut slots = 0usize;
    let mut per_layer = Vec::with_capacity(lengths.len());
    let mut per_head = Vec::with_capacity(lengths.len());
    for layer in lengths {
        let sum: usize = layer.iter().sum();
        if layer.contains(&0) {
            return Err(DmcError::EmptyCache);
        }
        per_layer.push((layer.len() * n_seen) as f64 / sum as f64);
        per_head.push(layer.iter().map(|&l| n_seen as f64 / l as f64).collect());
        total_len += sum;
        slots += layer.len();
    }
    Ok(CompressionReport {
        n_seen,
        lengths: lengths.to_vec(),
        per_head,
        per_layer,
        global: (slots * n_seen) as f64 / total_len as f64,
    })
}

/// One decision, as exported for analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub layer: usize,
    pub head: usize,
    pub t: usize,
    pub alpha: u8,
    pub omega: f64,
}

impl DecisionRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(alpha: bool, omega: f64) -> DecisionOutcome {
        DecisionOutcome { alpha, omega }
    }

    #[test]
    fn extract_scores_examples() {
        let mut q = vec![0.0, 1.0];
        let mut k = vec![-5.0, 2.0];
        let d = extract_scores(&mut q, &mut k, 0.0);
        assert!(!d.alpha);
        assert_eq!(d.omega, 0.5);
        assert_eq!((q[0], k[0]), (0.0, 0.0));
        assert_eq!((q[1], k[1]), (1.0, 2.0));
        let mut k = vec![2.0, 0.0];
        assert!(extract_scores(&mut q, &mut k, 0.0).alpha);
        let mut k = vec![0.0, 0.0];
        assert!(extract_scores(&mut q, &mut k, 0.0).alpha, "ties merge");
        let mut k = vec![2.0, 0.0];
        assert!(!extract_scores(&mut q, &mut k, 5.0).alpha);
    }

    #[test]
    fn first_token_always_appends() {
        let mut c = DmcHeadCache::new(2);
        let kind = c.update(decision(true, 0.3), &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(kind, UpdateKind::Appended);
        assert_eq!(c.len(), 1);
        assert_eq!(c.z(), 0.3);
    }

    #[test]
    fn accumulate_averages_last_slot() {
        let mut c = DmcHeadCache::new(2);
        c.update(decision(false, 0.5), &[2.0, 4.0], &[1.0, 1.0]).unwrap();
        c.update(decision(true, 0.5), &[4.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.z(), 1.0);
        let (k, v) = c.store().slot(0);
        assert_eq!(k, &[3.0, 2.0]);
        assert_eq!(v, &[2.0, 0.0]);
        assert_eq!(c.n_seen(), 2);
    }

    #[test]
    fn alternating_trace_length() {
        let mut c = DmcHeadCache::new(1);
        for a in [false, true, false, true, false] {
            c.update(decision(a, 0.5), &[1.0], &[1.0]).unwrap();
        }
        assert_eq!(c.len(), 3);
        assert_eq!(c.n_seen(), 5);
    }

    #[test]
    fn omega_floor_keeps_z_positive() {
        let mut c = DmcHeadCache::new(1);
        c.update(decision(false, 0.0), &[1.0], &[1.0]).unwrap();
        c.update(decision(true, 0.0), &[3.0], &[3.0]).unwrap();
        assert!(c.z() > 0.0);
        assert!(c.store().slot(0).0[0].is_finite());
    }

    #[test]
    fn window_cap_forces_append() {
        let mut c = DmcHeadCache::new(1).with_window_cap(Some(3));
        for _ in 0..7 {
            c.update(decision(true, 0.5), &[1.0], &[1.0]).unwrap();
        }
        // segments of 3, 3, 1
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn wrong_dim_is_rejected() {
        let mut c = DmcHeadCache::new(2);
        assert!(c.update(decision(false, 0.5), &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn compression_ratio_examples() {
        let none = compression_ratio(&[vec![10, 10], vec![10, 10]], 10).unwrap();
        assert_eq!(none.global, 1.0);
        let half = compression_ratio(&[vec![5, 5], vec![5, 5]], 10).unwrap();
        assert!((half.global - 2.0).abs() < 1e-12);
        let mixed = compression_ratio(&[vec![10, 5]], 10).unwrap();
        assert_eq!(mixed.per_head[0], vec![1.0, 2.0]);
        assert!((mixed.per_layer[0] - 20.0 / 15.0).abs() < 1e-12);
        assert!(compression_ratio(&[vec![1]], 0).is_err());
    }

    #[test]
    fn decision_record_line_round_trip() {
        let r = DecisionRecord {
            layer: 1,
            head: 2,
            t: 3,
            alpha: 1,
            omega: 0.25,
        };
        assert_eq!(DecisionRecord::from_line(&r.to_line()).unwrap(), r);
    }
}
