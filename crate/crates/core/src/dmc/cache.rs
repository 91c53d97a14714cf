use std::fmt;

use crate::model::{attend, KvCache, ModelConfig, ModelError};
use crate::numerics::kernels;

use super::inference::{
    compression_ratio, extract_scores, CompressionReport, DecisionOutcome, DecisionRecord, DmcHeadCache, FlatSlots,
    SlotStore, UpdateKind,
};
use super::{DmcError, DmcVariant};

/// Decision rule `(layer, head, t) -> merge?` used in place of the model's
/// own decision scores.
pub type ScriptedDecisions = Box<dyn Fn(usize, usize, usize) -> bool + Send + Sync>;

/// Where merge decisions come from.
pub enum DecisionSource {
    /// `round(sigmoid(k[0] - offset))` from the model's keys.
    Learned,
    Scripted(ScriptedDecisions),
}

impl fmt::Debug for DecisionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Learned => write!(f, "Learned"),
            Self::Scripted(_) => write!(f, "Scripted"),
        }
    }
}

/// Compressed cache for every layer and head of one sequence.
#[derive(Debug)]
pub struct DmcCache<S = FlatSlots> {
    heads: usize,
    dh: usize,
    offset: f64,
    variant: DmcVariant,
    source: DecisionSource,
    layers: Vec<Vec<DmcHeadCache<S>>>,
    position: usize,
    trace: Option<Vec<DecisionRecord>>,
    weights: Vec<f64>,
}

impl DmcCache<FlatSlots> {
    pub fn new(config: &ModelConfig, offset: f64, variant: DmcVariant) -> Result<Self, DmcError> {
        let dh = config.head_dim();
        Self::with_stores(config, offset, variant, |_, _| FlatSlots::new(dh))
    }
}

impl<S: SlotStore> DmcCache<S> {
    /// Builds the cache with one store per `(layer, head)` from `make`.
    pub fn with_stores(
        config: &ModelConfig,
        offset: f64,
        variant: DmcVariant,
        mut make: impl FnMut(usize, usize) -> S,
    ) -> Result<Self, DmcError> {
        if config.kv_heads() != config.n_heads || config.head_dim() < 2 {
            return Err(DmcError::Config(
                "compression needs one key head per query head and head_dim >= 2".into(),
            ));
        }
        let layers = (0..config.n_layers)
            .map(|l| {
                (0..config.n_heads)
                    .map(|h| DmcHeadCache::with_store(make(l, h)))
                    .collect()
            })
            .collect();
        Ok(Self {
            heads: config.n_heads,
            dh: config.head_dim(),
            offset,
            variant,
            source: DecisionSource::Learned,
            layers,
            position: 0,
            trace: None,
            weights: Vec::new(),
        })
    }

    pub fn with_source(mut self, source: DecisionSource) -> Self {
        self.source = source;
        self
    }

    /// Caps every open segment at `cap` tokens.
    pub fn with_window_cap(mut self, cap: Option<usize>) -> Self {
        self.layers.iter_mut().flatten().for_each(|h| h.set_window_cap(cap));
        self
    }

    /// Starts recording one [`DecisionRecord`] per layer, head and token.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> Option<&[DecisionRecord]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Vec<DecisionRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn head(&self, layer: usize, head: usize) -> &DmcHeadCache<S> {
        &self.layers[layer][head]
    }

    /// Every store tagged with its `(layer, head)`.
    pub fn stores(&self) -> impl Iterator<Item = (usize, usize, &S)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, heads)| heads.iter().enumerate().map(move |(h, c)| (l, h, c.store())))
    }

    /// `[layer][head]` compressed lengths.
    pub fn lengths(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.iter().map(DmcHeadCache::len).collect()).collect()
    }

    pub fn compression(&self) -> Result<CompressionReport, DmcError> {
        compression_ratio(&self.lengths(), self.position)
    }
}

impl<S: SlotStore> KvCache for DmcCache<S> {
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
        let (dh, heads, t) = (self.dh, self.heads, self.position);
        let shared = (self.variant == DmcVariant::HardC).then(|| {
            let k0 = (0..heads).map(|h| k[h * dh]).sum::<f64>() / heads as f64;
            let q0 = (0..heads).map(|h| q[h * dh]).sum::<f64>() / heads as f64;
            DecisionOutcome {
                alpha: kernels::sigmoid(k0 - self.offset) >= 0.5,
                omega: kernels::sigmoid(q0),
            }
        });
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let (qh, kh) = (&mut q[r.clone()], &mut k[r.clone()]);
            let mut outcome = extract_scores(qh, kh, self.offset);
            if let Some(s) = shared {
                outcome = s;
            }
            if let DecisionSource::Scripted(f) = &self.source {
                outcome.alpha = f(layer, h, t);
            }
            if self.variant == DmcVariant::UniformOmega {
                outcome.omega = 1.0;
            }
            let cache = &mut self.layers[layer][h];
            let kind = cache.update(outcome, kh, &v[r.clone()])?;
            if let Some(trace) = &mut self.trace {
                trace.push(DecisionRecord {
                    layer,
                    head: h,
                    t,
                    alpha: u8::from(kind == UpdateKind::Accumulated),
                    omega: outcome.omega,
                });
            }
            attend(qh, cache.store(), true, &mut self.weights, &mut out[r])?;
        }
        Ok(())
    }

    fn end_token(&mut self) {
        self.position += 1;
    }
}
