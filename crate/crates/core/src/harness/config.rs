//! Experiment configuration: a TOML file plus `section.key=value`
//! overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dmc::training::{CrSchedule, GumbelParams};
use crate::dmc::DmcVariant;
use crate::model::ModelConfig;

use super::{io_err, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    pub retrofit: RetrofitConfig,
    pub dmc: DmcConfig,
    pub baseline: BaselineConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                n_layers: 4,
                n_heads: 4,
                d_model: 64,
                vocab_size: 256,
                max_seq: 64,
                ..ModelConfig::default()
            },
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: PretrainConfig::default(),
            retrofit: RetrofitConfig::default(),
            dmc: DmcConfig::default(),
            baseline: BaselineConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Text files concatenated in order.
    pub paths: Vec<PathBuf>,
    /// Fraction of the byte stream held out for validation, taken from
    /// the end.
    pub val_fraction: f64,
    /// Tokens per training sequence.
    pub seq_len: usize,
    pub batch_size: usize,
    /// Validation sequences used by evaluation and analysis.
    pub eval_sequences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            paths: vec![PathBuf::from("corpus/sample.txt")],
            val_fraction: 0.1,
            seq_len: 64,
            batch_size: 8,
            eval_sequences: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-5,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Linear warmup before the cosine decay to 10% of `lr`.
    pub warmup_steps: usize,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            warmup_steps: 50,
            eval_every: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrofitConfig {
    /// Learning rate for every retrofit phase.
    pub lr: f64,
    /// Steps over which dimension 0 of queries and keys is faded out.
    pub anneal_steps: usize,
    /// Warn when the training perplexity exceeds this multiple of its value
    /// at the start of the phase.
    pub spike_guard: f64,
}

impl Default for RetrofitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            anneal_steps: 100,
            spike_guard: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmcConfig {
    pub variant: DmcVariant,
    pub gumbel: GumbelParams,
    /// Accumulation window of the training relaxation. Unset trains on the
    /// exact recurrence, which is what decoding computes.
    pub window: Option<usize>,
    pub schedule: CrSchedule,
}

impl DmcConfig {
    /// Window used for sequences of up to `max_seq` tokens.
    pub fn effective_window(&self, max_seq: usize) -> usize {
        self.window.unwrap_or(max_seq)
    }
}

impl Default for DmcConfig {
    fn default() -> Self {
        Self {
            variant: DmcVariant::Dmc,
            gumbel: GumbelParams::default(),
            window: None,
            schedule: CrSchedule::default(),
        }
    }
}

/// What the retrofit phase trains in place of learned compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Learned compression.
    #[default]
    None,
    /// Continued training without dimension 0 and without compression.
    Dim0Blind,
    /// Every `pool_width` consecutive tokens averaged into one slot.
    FixedPool,
    /// Key/value heads merged into groups, then continued training.
    Gqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub pool_width: usize,
    pub gqa_groups: usize,
    /// Compression ratio used to size eviction budgets.
    pub eviction_cr: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::None,
            pool_width: 2,
            gqa_groups: 2,
            eviction_cr: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 2,
            prompt_len: 32,
            gen_len: 32,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults when `None`), applies each
    /// `key=value` override and validates the result. Relative data paths
    /// are resolved against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                text.parse::<toml::Table>()
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        if let Some(dir) = path.and_then(Path::parent) {
            for p in &mut config.data.paths {
                if p.is_relative() && !p.exists() {
                    *p = dir.join(&*p);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Checks ranges and cross-field consistency. Data paths are checked
    /// separately by [`ExperimentConfig::check_paths`].
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        if self.model.dmc_enabled {
            return fail("model.dmc_enabled is set by the retrofit; leave it false".into());
        }
        if self.model.vocab_size < 256 {
            return fail(format!("byte tokens need vocab_size >= 256, got {}", self.model.vocab_size));
        }
        let d = &self.data;
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return fail(format!("data.val_fraction must be in (0, 1), got {}", d.val_fraction));
        }
        if d.seq_len == 0 || d.seq_len > self.model.max_seq {
            return fail(format!("data.seq_len {} must be in 1..={}", d.seq_len, self.model.max_seq));
        }
        if d.batch_size == 0 || d.eval_sequences == 0 {
            return fail("data.batch_size and data.eval_sequences must be positive".into());
        }
        let o = &self.optimizer;
        let ok = o.lr >= 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0
            && o.weight_decay >= 0.0
            && o.grad_clip >= 0.0;
        if !ok {
            return fail(format!("optimizer settings out of range: {o:?}"));
        }
        if self.retrofit.lr < 0.0 || !(self.retrofit.spike_guard > 1.0) {
            return fail("retrofit.lr must be >= 0 and retrofit.spike_guard > 1".into());
        }
        self.dmc.gumbel.validate()?;
        self.dmc.schedule.validate()?;
        if self.dmc.window == Some(0) {
            return fail("dmc.window must be at least 1".into());
        }
        let b = &self.baseline;
        match b.kind {
            BaselineKind::FixedPool if b.pool_width == 0 => return fail("baseline.pool_width must be >= 1".into()),
            BaselineKind::FixedPool if self.dmc.variant != DmcVariant::UniformOmega => {
                return fail("baseline.kind = \"fixed-pool\" averages uniformly; set dmc.variant = \"uniform-omega\"".into())
            }
            BaselineKind::Gqa if b.gqa_groups == 0 || self.model.n_heads % b.gqa_groups != 0 => {
                return fail(format!("baseline.gqa_groups {} must divide n_heads {}", b.gqa_groups, self.model.n_heads))
            }
            _ => {}
        }
        if !(b.eviction_cr >= 1.0) {
            return fail("baseline.eviction_cr must be >= 1".into());
        }
        let bench = &self.bench;
        if bench.batch == 0 || bench.prompt_len == 0 || bench.prompt_len + bench.gen_len > self.model.max_seq {
            return fail(format!(
                "bench needs batch >= 1, prompt_len >= 1 and prompt_len + gen_len <= {}",
                self.model.max_seq
            ));
        }
        Ok(())
    }

    /// Every data path must exist.
    pub fn check_paths(&self) -> Result<(), HarnessError> {
        if self.data.paths.is_empty() {
            return Err(HarnessError::Config("data.paths is empty".into()));
        }
        match self.data.paths.iter().find(|p| !p.exists()) {
            Some(p) => Err(HarnessError::Config(format!("data path {} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as a TOML value
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
