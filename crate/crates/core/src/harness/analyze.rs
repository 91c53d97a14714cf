//! Compression analysis over decoded sequences.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dmc::inference::{compression_ratio, CompressionReport, DecisionRecord};

use super::checkpoint::Checkpoint;
use super::corpus::detokenize_lossy;
use super::eval::compressed_cache;
use super::{io_err, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrPoint {
    /// Tokens read so far.
    pub length: usize,
    pub cr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub position: usize,
    pub mean_alpha: f64,
}

/// Token segmentation of one head over one sequence. Tokens sharing a
/// cache slot form one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub sequence: usize,
    pub layer: usize,
    pub head: usize,
    /// Start position of every segment.
    pub starts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub sequences: usize,
    pub tokens_per_sequence: usize,
    /// Aggregated over all sequences; `per_head` is the CR matrix.
    pub compression: CompressionReport,
    /// Global ratio recomputed from the matrix.
    pub matrix_cr: f64,
    /// Global ratio counted directly from the decision trace.
    pub trace_cr: f64,
    pub cr_vs_length: Vec<CrPoint>,
    pub alpha_vs_position: Vec<AlphaPoint>,
    pub segmentations: Vec<Segmentation>,
    #[serde(skip)]
    pub trace: Vec<Vec<DecisionRecord>>,
    #[serde(skip)]
    pub texts: Vec<Vec<usize>>,
}

/// Global ratio implied by a `[layer][head]` matrix of per-head ratios
/// that all saw the same number of tokens.
pub fn global_from_matrix(per_head: &[Vec<f64>]) -> f64 {
    let heads: usize = per_head.iter().map(Vec::len).sum();
    heads as f64 / per_head.iter().flatten().map(|cr| 1.0 / cr).sum::<f64>()
}

/// Decodes each of `seqs` through the compressed cache of `checkpoint`,
/// recording every decision. Segmentations are kept for the first
/// `segment_sequences` sequences.
pub fn analyze(
    checkpoint: &Checkpoint,
    seqs: &[Vec<usize>],
    segment_sequences: usize,
) -> Result<AnalysisReport, HarnessError> {
    let n = seqs.first().map(Vec::len).unwrap_or(0);
    if n == 0 || seqs.iter().any(|s| s.len() != n) {
        return Err(HarnessError::Data(
            "analysis needs nonempty sequences of equal length".into(),
        ));
    }
    let model = &checkpoint.model;
    let cfg = &model.config;
    let (nl, nh) = (cfg.n_layers, cfg.n_heads);
    let mut lengths = vec![vec![0usize; nh]; nl];
    let mut traces = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut cache = compressed_cache(model, &checkpoint.manifest.attention)?.with_trace();
        model.decode_sequence(s, &mut cache)?;
        for (acc, l) in lengths.iter_mut().flatten().zip(cache.lengths().concat()) {
            *acc += l;
        }
        traces.push(cache.take_trace());
    }
    let total = n * seqs.len();
    let compression = compression_ratio(&lengths, total)?;
    let matrix_cr = global_from_matrix(&compression.per_head);

    // Appends per position, over every sequence, layer and head.
    let mut appends = vec![0usize; n];
    let mut alpha_sum = vec![0.0; n];
    for trace in &traces {
        for r in trace {
            alpha_sum[r.t] += f64::from(r.alpha);
            if r.alpha == 0 {
                appends[r.t] += 1;
            }
        }
    }
    let per_position = (nl * nh * seqs.len()) as f64;
    let mut kept = 0usize;
    let cr_vs_length = appends
        .iter()
        .enumerate()
        .map(|(t, a)| {
            kept += a;
            CrPoint {
                length: t + 1,
                cr: per_position * (t + 1) as f64 / kept as f64,
            }
        })
        .collect();
    let trace_cr = per_position * n as f64 / kept as f64;
    let alpha_vs_position = alpha_sum
        .iter()
        .enumerate()
        .map(|(position, s)| AlphaPoint {
            position,
            mean_alpha: s / per_position,
        })
        .collect();

    let mut segmentations = Vec::new();
    for (sequence, trace) in traces.iter().enumerate().take(segment_sequences) {
        let mut starts = vec![vec![Vec::new(); nh]; nl];
        for r in trace {
            if r.alpha == 0 {
                starts[r.layer][r.head].push(r.t);
            }
        }
        for (layer, heads) in starts.into_iter().enumerate() {
            for (head, starts) in heads.into_iter().enumerate() {
                segmentations.push(Segmentation {
                    sequence,
                    layer,
                    head,
                    starts,
                });
            }
        }
    }
    Ok(AnalysisReport {
        sequences: seqs.len(),
        tokens_per_sequence: n,
        compression,
        matrix_cr,
        trace_cr,
        cr_vs_length,
        alpha_vs_position,
        segmentations,
        trace: traces,
        texts: seqs.to_vec(),
    })
}

/// Renders the tokens of `seg` with `|` between segments. Bytes are shown
/// lossily, with newlines escaped.
pub fn render_segments(tokens: &[usize], seg: &Segmentation) -> String {
    let mut out = String::new();
    let mut bounds = seg.starts.iter().copied().skip(1).chain([tokens.len()]);
    let mut start = 0;
    while start < tokens.len() {
        let end = bounds.next().unwrap_or(tokens.len());
        if start > 0 {
            out.push('|');
        }
        out.push_str(&detokenize_lossy(&tokens[start..end]).replace('\n', "\\n"));
        start = end;
    }
    out
}

impl AnalysisReport {
    /// Human-readable report with the CR matrix, both global ratios, the
    /// two curves and the segmentations.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.compression;
        let _ = writeln!(s, "sequences: {}", self.sequences);
        let _ = writeln!(s, "tokens per sequence: {}", self.tokens_per_sequence);
        let _ = writeln!(s, "global cr: {:.6}", c.global);
        let _ = writeln!(s, "global cr from matrix: {:.6}", self.matrix_cr);
        let _ = writeln!(s, "global cr from trace: {:.6}", self.trace_cr);
        let _ = writeln!(s, "\ncompression ratio by layer (rows) and head (columns):");
        for (l, row) in c.per_head.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:7.3}")).collect();
            let _ = writeln!(s, "L{l:<3}{}  | {:7.3}", cells.join(" "), c.per_layer[l]);
        }
        let _ = writeln!(s, "\ncr vs length:");
        for p in &self.cr_vs_length {
            if p.length.is_power_of_two() || p.length == self.tokens_per_sequence {
                let _ = writeln!(s, "  {:>6} {:.4}", p.length, p.cr);
            }
        }
        let _ = writeln!(s, "\nmean alpha vs position:");
        for p in &self.alpha_vs_position {
            let _ = writeln!(s, "  {:>6} {:.4}", p.position, p.mean_alpha);
        }
        let _ = writeln!(s, "\nsegmentation:");
        for seg in &self.segmentations {
            let tokens = &self.texts[seg.sequence];
            let _ = writeln!(
                s,
                "  seq {} L{} H{} ({} slots): {}",
                seg.sequence,
                seg.layer,
                seg.head,
                seg.starts.len(),
                render_segments(tokens, seg)
            );
        }
        s
    }

    /// Writes `report.txt`, the CSV tables and `decisions.jsonl` into
    /// `dir`, returning the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        let text = dir.join("report.txt");
        std::fs::write(&text, self.to_text()).map_err(io_err(&text))?;
        written.push(text);

        #[derive(Serialize)]
        struct MatrixRow {
            layer: usize,
            head: usize,
            length: usize,
            cr: f64,
        }
        let rows = self.compression.per_head.iter().enumerate().flat_map(|(layer, heads)| {
            heads.iter().enumerate().map(move |(head, &cr)| MatrixRow {
                layer,
                head,
                length: self.compression.lengths[layer][head],
                cr,
            })
        });
        written.push(write_csv(&dir.join("cr_matrix.csv"), rows)?);
        written.push(write_csv(&dir.join("cr_vs_length.csv"), self.cr_vs_length.iter())?);
        written.push(write_csv(&dir.join("alpha_vs_position.csv"), self.alpha_vs_position.iter())?);

        #[derive(Serialize)]
        struct SegmentRow {
            sequence: usize,
            layer: usize,
            head: usize,
            slots: usize,
            text: String,
        }
        let rows = self.segmentations.iter().map(|seg| SegmentRow {
            sequence: seg.sequence,
            layer: seg.layer,
            head: seg.head,
            slots: seg.starts.len(),
            text: render_segments(&self.texts[seg.sequence], seg),
        });
        written.push(write_csv(&dir.join("segments.csv"), rows)?);

        let path = dir.join("decisions.jsonl");
        let mut lines = String::new();
        for (sequence, trace) in self.trace.iter().enumerate() {
            for r in trace {
                let _ = writeln!(
                    lines,
                    "{{\"sequence\":{sequence},{}",
                    &r.to_line()[1..]
                );
            }
        }
        std::fs::write(&path, lines).map_err(io_err(&path))?;
        written.push(path);
        Ok(written)
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<PathBuf, HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => HarnessError::Data(format!("{}: {other:?}", path.display())),
    }
}
