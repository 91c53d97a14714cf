//! Greedy decode benchmark with cache size accounting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{Budget, EvictionCache, EvictionPolicy};
use crate::dmc::DmcCache;
use crate::model::{KvCache, Model};
use crate::paging::{memory_report, MemoryReport, PagePool, PageTable, PoolConfig};

use super::analyze::write_csv;
use super::checkpoint::{AttentionSpec, Checkpoint};
use super::config::BenchConfig;
use super::corpus::detokenize_lossy;
use super::eval::{compressed_cache, compressed_cache_with, uncompressed_cache};
use super::{io_err, HarnessError};

/// First index of the largest logit.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Output of one benchmarked sequence.
#[derive(Debug, Clone)]
pub struct DecodeRun {
    pub generated: Vec<usize>,
    /// Largest total cached length over all layers and heads, in slots.
    pub peak_slots: usize,
    /// Tokens per second over the last third of generation.
    pub tokens_per_second: f64,
}

/// Reads `prompt`, then greedily generates `gen_len` tokens, feeding each
/// one back so the cache ends up holding `prompt + gen_len` tokens.
pub fn greedy_decode<C: KvCache>(
    model: &Model,
    cache: &mut C,
    prompt: &[usize],
    gen_len: usize,
    slots: impl Fn(&C) -> usize,
) -> Result<DecodeRun, HarnessError> {
    if prompt.is_empty() {
        return Err(HarnessError::Data("empty prompt".into()));
    }
    let mut peak = 0;
    let mut logits = Vec::new();
    for &t in prompt {
        logits = model.decode_step(t, cache)?;
        peak = peak.max(slots(cache));
    }
    let timed_from = gen_len - gen_len / 3;
    let mut generated = Vec::with_capacity(gen_len);
    let mut start = Instant::now();
    for i in 0..gen_len {
        if i == timed_from {
            start = Instant::now();
        }
        let next = argmax(&logits);
        generated.push(next);
        logits = model.decode_step(next, cache)?;
        peak = peak.max(slots(cache));
    }
    let timed = gen_len - timed_from;
    let secs = start.elapsed().as_secs_f64();
    Ok(DecodeRun {
        generated,
        peak_slots: peak,
        tokens_per_second: if timed > 0 && secs > 0.0 { timed as f64 / secs } else { 0.0 },
    })
}

/// Greedy continuation of `prompt` with the cache matching the
/// checkpoint's attention.
pub fn generate(checkpoint: &Checkpoint, prompt: &[usize], gen_len: usize) -> Result<Vec<usize>, HarnessError> {
    let model = &checkpoint.model;
    let spec = &checkpoint.manifest.attention;
    if prompt.len() + gen_len > model.config.max_seq {
        return Err(HarnessError::Config(format!(
            "prompt ({}) plus generated tokens ({gen_len}) exceed max_seq {}",
            prompt.len(),
            model.config.max_seq
        )));
    }
    let run = if matches!(spec, AttentionSpec::Compressed { .. }) {
        greedy_decode(model, &mut compressed_cache(model, spec)?, prompt, gen_len, |_| 0)?
    } else {
        greedy_decode(model, &mut uncompressed_cache(model, spec), prompt, gen_len, |_| 0)?
    };
    Ok(run.generated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    /// Per-sequence eviction budget at the end of generation.
    pub budget: Option<usize>,
    pub peak_slots_per_sequence: Vec<usize>,
    /// Sum of the per-sequence peaks.
    pub peak_slots: usize,
    /// `peak_slots * 2 * head_dim`: scalars held by keys and values.
    pub peak_elements: usize,
    /// Uncompressed peak over this system's peak.
    pub reduction: f64,
    pub generated: Vec<String>,
}

/// Deterministic benchmark results. Wall-clock throughput lives in
/// [`BenchTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub n_layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Compression ratio achieved by the compressed cache, if any.
    pub measured_cr: Option<f64>,
    /// Ratio used to size the eviction budgets.
    pub eviction_cr: f64,
    pub systems: Vec<SystemReport>,
    /// Paged storage accounting for the compressed cache.
    pub paged: Option<MemoryReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub system: String,
    pub tokens_per_second: f64,
}

/// Runs one sequence per prompt concurrently, each with its own cache.
fn run_batch<C: KvCache + Send>(
    model: &Model,
    prompts: &[Vec<usize>],
    gen_len: usize,
    make: impl Fn(&[usize]) -> Result<C, HarnessError> + Sync,
    slots: impl Fn(&C) -> usize + Sync,
) -> Result<Vec<(DecodeRun, C)>, HarnessError> {
    std::thread::scope(|s| {
        let handles: Vec<_> = prompts
            .iter()
            .map(|p| {
                let (make, slots) = (&make, &slots);
                s.spawn(move || {
                    let mut cache = make(p)?;
                    let run = greedy_decode(model, &mut cache, p, gen_len, slots)?;
                    Ok((run, cache))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode thread panicked"))
            .collect()
    })
}

fn total(lengths: Vec<Vec<usize>>) -> usize {
    lengths.into_iter().flatten().sum()
}

/// Decodes `prompts` with every applicable cache: uncompressed, the
/// checkpoint's compressed cache on paged storage, and both eviction
/// policies. Eviction budgets use the compressed cache's measured ratio,
/// or `eviction_cr` for uncompressed checkpoints.
pub fn bench_decode(
    checkpoint: &Checkpoint,
    cfg: &BenchConfig,
    prompts: &[Vec<usize>],
    eviction_cr: f64,
) -> Result<(BenchReport, Vec<BenchTiming>), HarnessError> {
    let model = &checkpoint.model;
    let mc = &model.config;
    let spec = &checkpoint.manifest.attention;
    let (pl, gl) = (cfg.prompt_len, cfg.gen_len);
    if pl == 0 || pl + gl > mc.max_seq {
        return Err(HarnessError::Config(format!(
            "bench.prompt_len ({pl}) must be positive and prompt_len + gen_len ({}) at most max_seq {}",
            pl + gl,
            mc.max_seq
        )));
    }
    if prompts.len() != cfg.batch || prompts.iter().any(|p| p.len() != pl) {
        return Err(HarnessError::Data(format!("need {} prompts of {pl} tokens", cfg.batch)));
    }
    let dh = mc.head_dim();
    let mut systems = Vec::new();
    let mut timing = Vec::new();
    let mut record = |name: &str, budget, runs: &[&DecodeRun], systems: &mut Vec<SystemReport>| {
        let per: Vec<usize> = runs.iter().map(|r| r.peak_slots).collect();
        let peak: usize = per.iter().sum();
        timing.push(BenchTiming {
            system: name.to_string(),
            tokens_per_second: runs.iter().map(|r| r.tokens_per_second).sum::<f64>() / runs.len() as f64,
        });
        systems.push(SystemReport {
            system: name.to_string(),
            budget,
            peak_slots_per_sequence: per,
            peak_slots: peak,
            peak_elements: peak * 2 * dh,
            reduction: 0.0,
            generated: runs.iter().map(|r| detokenize_lossy(&r.generated)).collect(),
        });
    };

    let vanilla = run_batch(model, prompts, gl, |_| Ok(uncompressed_cache(model, spec)), |c| total(c.lengths()))?;
    record("vanilla", None, &vanilla.iter().map(|(r, _)| r).collect::<Vec<_>>(), &mut systems);

    let mut measured_cr = None;
    let mut paged = None;
    if matches!(spec, AttentionSpec::Compressed { .. }) {
        let pool = PagePool::new(dh, PoolConfig::default()).map_err(crate::dmc::DmcError::from)?;
        let runs = run_batch(
            model,
            prompts,
            gl,
            |_| compressed_cache_with(model, spec, |_, _| PageTable::new(pool.clone())),
            |c: &DmcCache<PageTable>| total(c.lengths()),
        )?;
        let n_seen = pl + gl;
        let report = memory_report(&pool, runs.iter().flat_map(|(_, c)| c.stores()), n_seen);
        measured_cr = Some(report.vanilla_slots as f64 / report.logical_slots as f64);
        record("dmc", None, &runs.iter().map(|(r, _)| r).collect::<Vec<_>>(), &mut systems);
        pool.audit(runs.iter().flat_map(|(_, c)| c.stores().map(|(_, _, t)| t)))
            .map_err(crate::dmc::DmcError::from)?;
        paged = Some(report);
    }
    let eviction_cr = measured_cr.unwrap_or(eviction_cr);
    let exclude = !matches!(spec, AttentionSpec::Standard);
    let end_budget = Budget::Ratio {
        cr: eviction_cr,
        prompt_len: pl,
    }
    .at(pl + gl - 1)?
    .0;
    for (name, policy) in [("h2o", EvictionPolicy::H2o), ("tova", EvictionPolicy::Tova)] {
        let runs = run_batch(
            model,
            prompts,
            gl,
            |p| {
                let budget = Budget::Ratio {
                    cr: eviction_cr,
                    prompt_len: p.len(),
                };
                Ok(EvictionCache::new(mc, policy, budget)?.with_dim0_excluded(exclude))
            },
            |c| total(c.lengths()),
        )?;
        record(name, Some(end_budget), &runs.iter().map(|(r, _)| r).collect::<Vec<_>>(), &mut systems);
    }
    let base = systems[0].peak_slots as f64;
    for s in &mut systems {
        s.reduction = base / s.peak_slots as f64;
    }
    Ok((
        BenchReport {
            batch: cfg.batch,
            prompt_len: pl,
            gen_len: gl,
            n_layers: mc.n_layers,
            kv_heads: mc.kv_heads(),
            head_dim: dh,
            measured_cr,
            eviction_cr,
            systems,
            paged,
        },
        timing,
    ))
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "batch {} prompt {} generate {} | layers {} kv heads {} head dim {}",
            self.batch, self.prompt_len, self.gen_len, self.n_layers, self.kv_heads, self.head_dim
        );
        if let Some(cr) = self.measured_cr {
            let _ = writeln!(s, "measured compression ratio: {cr:.6}");
        }
        let _ = writeln!(s, "eviction ratio: {:.6}", self.eviction_cr);
        let _ = writeln!(s, "\n{:<8} {:>8} {:>12} {:>14} {:>10}", "system", "budget", "peak slots", "peak elements", "reduction");
        for sys in &self.systems {
            let budget = sys.budget.map_or("-".to_string(), |b| b.to_string());
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>12} {:>14} {:>10.4}",
                sys.system, budget, sys.peak_slots, sys.peak_elements, sys.reduction
            );
        }
        if let Some(m) = &self.paged {
            let _ = writeln!(s, "\npaged storage (compressed cache):\n{}", m.to_text());
        }
        let _ = writeln!(s, "\nsamples:");
        for sys in &self.systems {
            for (i, g) in sys.generated.iter().enumerate() {
                let _ = writeln!(s, "  {} #{i}: {:?}", sys.system, g);
            }
        }
        s
    }

    /// Writes `bench.txt`, `bench.csv` and `bench.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let text = dir.join("bench.txt");
        std::fs::write(&text, self.to_text()).map_err(io_err(&text))?;
        #[derive(Serialize)]
        struct Row<'a> {
            system: &'a str,
            budget: Option<usize>,
            peak_slots: usize,
            peak_elements: usize,
            reduction: f64,
        }
        let csv = write_csv(
            &dir.join("bench.csv"),
            self.systems.iter().map(|s| Row {
                system: &s.system,
                budget: s.budget,
                peak_slots: s.peak_slots,
                peak_elements: s.peak_elements,
                reduction: s.reduction,
            }),
        )?;
        let json = dir.join("bench.json");
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, body + "\n").map_err(io_err(&json))?;
        Ok(vec![text, csv, json])
    }
}
