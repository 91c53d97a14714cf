//! Line-delimited JSON training records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Anneal,
    Ramp,
    Solidify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    pub lm: f64,
    pub cr_loss: f64,
    pub head_consistency: f64,
    pub total: f64,
    pub target_cr: f64,
    /// Ratio implied by the training decisions over the batch.
    pub achieved_cr: f64,
    pub per_layer_cr: Vec<f64>,
    pub lr: f64,
    pub lr_mult: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Eval {
        phase: Phase,
        step: usize,
        val_loss: f64,
        val_ppl: f64,
    },
    Warning {
        phase: Phase,
        step: usize,
        message: String,
    },
    Checkpoint {
        phase: Phase,
        step: usize,
        file: String,
        target_cr: f64,
        achieved_cr: f64,
        val_loss: f64,
    },
}

/// Collects records in memory and optionally streams them to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<Record>,
    sink: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self, HarnessError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn push(&mut self, record: Record) -> Result<(), HarnessError> {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&record).expect("records serialize");
            writeln!(sink, "{line}").map_err(io_err(Path::new("metrics")))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn steps(&self, phase: Phase) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(move |r| match r {
            Record::Step(s) if s.phase == phase => Some(s),
            _ => None,
        })
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        if let Some(sink) = &mut self.sink {
            sink.flush().map_err(io_err(Path::new("metrics")))?;
        }
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Parses a metrics stream written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<Record>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display()))))
        .collect()
}
