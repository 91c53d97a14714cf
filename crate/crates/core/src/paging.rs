//! Paged storage for variable-length per-head key/value sequences.
//!
//! A [`PagePool`] hands out fixed-size pages and is shared by every table
//! of every sequence. A [`PageTable`] holds one head's slots in logical
//! order; each slot stores a key and its value side by side. Tables own
//! their page buffers while the pages are allocated, so reads never lock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmc::inference::SlotStore;
use crate::dmc::DmcError;

pub const DEFAULT_PAGE_SIZE: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum PagingError {
    #[error("page pool exhausted at {pages} pages")]
    Exhausted { pages: usize },
    #[error("overwrite on an empty table")]
    EmptyTable,
    #[error("slot has dimension {got}, table expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid pool configuration: {0}")]
    Config(String),
    #[error("ownership audit failed: {0}")]
    Audit(String),
}

impl From<PagingError> for DmcError {
    fn from(e: PagingError) -> Self {
        match e {
            PagingError::EmptyTable => DmcError::EmptyCache,
            other => DmcError::Capacity(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Slots per page.
    pub page_size: usize,
    /// Pages created up front.
    pub initial_pages: usize,
    /// Hard cap on the pool size.
    pub max_pages: usize,
    /// Whether the pool may double when it runs out of free pages.
    pub growth: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            page_size: DEFAULT_PAGE_SIZE,
            initial_pages: 16,
            max_pages: 1 << 20,
            growth: true,
        }
    }
}

type TableId = u64;

#[derive(Debug)]
struct PoolInner {
    free: Vec<(usize, Box<[f64]>)>,
    owner: Vec<Option<TableId>>,
}

/// Shared, thread-safe page allocator.
#[derive(Debug)]
pub struct PagePool {
    config: PoolConfig,
    dim: usize,
    inner: Mutex<PoolInner>,
    next_table: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub total_pages: usize,
    pub free_pages: usize,
    pub allocated_pages: usize,
}

impl PagePool {
    /// Pool of pages whose slots hold a `dim`-wide key and value.
    pub fn new(dim: usize, config: PoolConfig) -> Result<Arc<Self>, PagingError> {
        if config.page_size == 0 || dim == 0 {
            return Err(PagingError::Config("page_size and dim must be positive".into()));
        }
        if config.initial_pages > config.max_pages {
            return Err(PagingError::Config("initial_pages exceeds max_pages".into()));
        }
        let pool = Self {
            config,
            dim,
            inner: Mutex::new(PoolInner {
                free: Vec::new(),
                owner: Vec::new(),
            }),
            next_table: AtomicU64::new(0),
        };
        {
            let mut inner = pool.inner.lock();
            pool.grow_to(&mut inner, config.initial_pages);
        }
        Ok(Arc::new(pool))
    }

    pub fn config(&self) -> PoolConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn page_len(&self) -> usize {
        self.config.page_size * 2 * self.dim
    }

    fn grow_to(&self, inner: &mut PoolInner, target: usize) {
        let start = inner.owner.len();
        // Newest pages go to the bottom of the stack so low ids are used first.
        let mut fresh: Vec<(usize, Box<[f64]>)> = (start..target)
            .rev()
            .map(|id| (id, vec![0.0; self.page_len()].into_boxed_slice()))
            .collect();
        fresh.append(&mut inner.free);
        inner.free = fresh;
        inner.owner.resize(target, None);
    }

    fn allocate(&self, table: TableId) -> Result<(usize, Box<[f64]>), PagingError> {
        let mut inner = self.inner.lock();
        if inner.free.is_empty() {
            let total = inner.owner.len();
            if !self.config.growth || total >= self.config.max_pages {
                return Err(PagingError::Exhausted { pages: total });
            }
            let target = (total * 2).clamp(1, self.config.max_pages);
            self.grow_to(&mut inner, target);
        }
        let (id, buf) = inner.free.pop().expect("pool grew");
        inner.owner[id] = Some(table);
        Ok((id, buf))
    }

    fn release(&self, pages: impl IntoIterator<Item = (usize, Box<[f64]>)>) {
        let mut inner = self.inner.lock();
        for (id, buf) in pages {
            inner.owner[id] = None;
            inner.free.push((id, buf));
        }
    }

    pub fn stats(&self) -> PoolStats {
        let inner = self.inner.lock();
        let total = inner.owner.len();
        PoolStats {
            total_pages: total,
            free_pages: inner.free.len(),
            allocated_pages: inner.owner.iter().filter(|o| o.is_some()).count(),
        }
    }

    /// Checks that every allocated page is held by exactly one of `tables`,
    /// that each table holds only pages recorded as its own, and that
    /// allocated plus free pages account for the whole pool.
    pub fn audit<'a>(&self, tables: impl IntoIterator<Item = &'a PageTable>) -> Result<(), PagingError> {
        let inner = self.inner.lock();
        let total = inner.owner.len();
        let mut seen = vec![false; total];
        for t in tables {
            for &id in &t.ids {
                if id >= total || seen[id] {
                    return Err(PagingError::Audit(format!("page {id} is referenced twice or unknown")));
                }
                seen[id] = true;
                if inner.owner[id] != Some(t.id) {
                    return Err(PagingError::Audit(format!("page {id} is not owned by table {}", t.id)));
                }
            }
        }
        for (id, owner) in inner.owner.iter().enumerate() {
            if owner.is_some() && !seen[id] {
                return Err(PagingError::Audit(format!("page {id} is allocated but unreferenced")));
            }
        }
        for (id, _) in &inner.free {
            if inner.owner[*id].is_some() || seen[*id] {
                return Err(PagingError::Audit(format!("free page {id} is still in use")));
            }
        }
        let allocated = inner.owner.iter().filter(|o| o.is_some()).count();
        if allocated + inner.free.len() != total {
            return Err(PagingError::Audit(format!(
                "{allocated} allocated + {} free != {total} pages",
                inner.free.len()
            )));
        }
        Ok(())
    }
}

/// Location of a slot inside a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotAddress {
    pub page: usize,
    pub offset: usize,
}

/// One head's paged slot sequence.
#[derive(Debug)]
pub struct PageTable {
    pool: Arc<PagePool>,
    id: TableId,
    ids: Vec<usize>,
    pages: Vec<Box<[f64]>>,
    len: usize,
    z: f64,
}

impl PageTable {
    pub fn new(pool: Arc<PagePool>) -> Self {
        let id = pool.next_table.fetch_add(1, Ordering::Relaxed);
        Self {
            pool,
            id,
            ids: Vec::new(),
            pages: Vec::new(),
            len: 0,
            z: 0.0,
        }
    }

    pub fn page_ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn pages(&self) -> usize {
        self.ids.len()
    }

    fn page_size(&self) -> usize {
        self.pool.config.page_size
    }

    fn check_dim(&self, key: &[f64], value: &[f64]) -> Result<(), PagingError> {
        let dim = self.pool.dim;
        for got in [key.len(), value.len()] {
            if got != dim {
                return Err(PagingError::Dimension { expected: dim, got });
            }
        }
        Ok(())
    }

    fn write(&mut self, index: usize, key: &[f64], value: &[f64]) {
        let (ps, dim) = (self.page_size(), self.pool.dim);
        let base = (index % ps) * 2 * dim;
        let page = &mut self.pages[index / ps];
        page[base..base + dim].copy_from_slice(key);
        page[base + dim..base + 2 * dim].copy_from_slice(value);
    }

    /// Appends a slot, allocating a page when the last one is full.
    pub fn push(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<SlotAddress, PagingError> {
        self.check_dim(key, value)?;
        let ps = self.page_size();
        if self.len == self.pages.len() * ps {
            let (id, buf) = self.pool.allocate(self.id)?;
            self.ids.push(id);
            self.pages.push(buf);
        }
        self.write(self.len, key, value);
        self.len += 1;
        self.z = z;
        Ok(SlotAddress {
            page: self.ids[(self.len - 1) / ps],
            offset: (self.len - 1) % ps,
        })
    }

    /// Replaces the last slot in place.
    pub fn replace_last(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<SlotAddress, PagingError> {
        self.check_dim(key, value)?;
        if self.len == 0 {
            return Err(PagingError::EmptyTable);
        }
        self.write(self.len - 1, key, value);
        self.z = z;
        let ps = self.page_size();
        Ok(SlotAddress {
            page: self.ids[(self.len - 1) / ps],
            offset: (self.len - 1) % ps,
        })
    }

    /// Keys and values of the first `len` slots, concatenated in logical
    /// order.
    pub fn gather(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.pool.dim;
        let mut keys = Vec::with_capacity(self.len * dim);
        let mut values = Vec::with_capacity(self.len * dim);
        for i in 0..self.len {
            let (k, v) = self.slot(i);
            keys.extend_from_slice(k);
            values.extend_from_slice(v);
        }
        (keys, values)
    }

    /// Returns every page to the pool.
    pub fn clear(&mut self) {
        let pages: Vec<_> = self.ids.drain(..).zip(self.pages.drain(..)).collect();
        self.pool.release(pages);
        self.len = 0;
        self.z = 0.0;
    }
}

impl Drop for PageTable {
    fn drop(&mut self) {
        self.clear();
    }
}

impl SlotStore for PageTable {
    fn head_dim(&self) -> usize {
        self.pool.dim
    }

    fn len(&self) -> usize {
        self.len
    }

    fn z(&self) -> f64 {
        self.z
    }

    fn slot(&self, i: usize) -> (&[f64], &[f64]) {
        assert!(i < self.len, "slot {i} beyond length {}", self.len);
        let (ps, dim) = (self.page_size(), self.pool.dim);
        let base = (i % ps) * 2 * dim;
        let page = &self.pages[i / ps];
        (&page[base..base + dim], &page[base + dim..base + 2 * dim])
    }

    fn append(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<(), DmcError> {
        self.push(key, value, z)?;
        Ok(())
    }

    fn overwrite_last(&mut self, key: &[f64], value: &[f64], z: f64) -> Result<(), DmcError> {
        self.replace_last(key, value, z)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMemory {
    pub layer: usize,
    pub head: usize,
    pub logical_slots: usize,
    pub pages: usize,
    pub allocated_slots: usize,
    /// `allocated_slots / logical_slots`; 1 for an empty table.
    pub overhead: f64,
}

/// Cache size accounting in slots (one key plus one value each), pages and
/// scalar elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub page_size: usize,
    pub head_dim: usize,
    pub n_seen: usize,
    pub heads: Vec<HeadMemory>,
    pub logical_slots: usize,
    pub allocated_slots: usize,
    /// Slots an uncompressed cache would hold: tables times `n_seen`.
    pub vanilla_slots: usize,
    /// Scalars stored in logical slots: `2 * head_dim` per slot.
    pub logical_elements: usize,
    pub allocated_elements: usize,
    pub pool: PoolStats,
}

impl MemoryReport {
    pub fn overhead(&self) -> f64 {
        if self.logical_slots == 0 {
            1.0
        } else {
            self.allocated_slots as f64 / self.logical_slots as f64
        }
    }

    /// Human-readable summary, one `key: value` per line.
    pub fn to_text(&self) -> String {
        format!(
            "page_size: {}\nhead_dim: {}\nn_seen: {}\ntables: {}\nlogical_slots: {}\nallocated_slots: {}\nvanilla_slots: {}\nlogical_elements: {}\nallocated_elements: {}\noverhead: {:.6}\npool_pages: {}\nfree_pages: {}\n",
            self.page_size,
            self.head_dim,
            self.n_seen,
            self.heads.len(),
            self.logical_slots,
            self.allocated_slots,
            self.vanilla_slots,
            self.logical_elements,
            self.allocated_elements,
            self.overhead(),
            self.pool.total_pages,
            self.pool.free_pages,
        )
    }
}

/// Accounting over `(layer, head, table)` triples that all consumed
/// `n_seen` tokens.
pub fn memory_report<'a>(
    pool: &PagePool,
    tables: impl IntoIterator<Item = (usize, usize, &'a PageTable)>,
    n_seen: usize,
) -> MemoryReport {
    let ps = pool.config.page_size;
    let heads: Vec<HeadMemory> = tables
        .into_iter()
        .map(|(layer, head, t)| {
            let allocated = t.pages() * ps;
            HeadMemory {
                layer,
                head,
                logical_slots: t.len,
                pages: t.pages(),
                allocated_slots: allocated,
                overhead: if t.len == 0 { 1.0 } else { allocated as f64 / t.len as f64 },
            }
        })
        .collect();
    let logical: usize = heads.iter().map(|h| h.logical_slots).sum();
    let allocated: usize = heads.iter().map(|h| h.allocated_slots).sum();
    MemoryReport {
        page_size: ps,
        head_dim: pool.dim,
        n_seen,
        vanilla_slots: heads.len() * n_seen,
        heads,
        logical_slots: logical,
        allocated_slots: allocated,
        logical_elements: logical * 2 * pool.dim,
        allocated_elements: allocated * 2 * pool.dim,
        pool: pool.stats(),
    }
}
