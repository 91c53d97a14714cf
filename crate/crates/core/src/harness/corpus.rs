//! Byte-level corpus: UTF-8 text files become a stream of tokens 0..256.

use std::path::Path;

use rand::Rng;

use super::{io_err, HarnessError};

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`tokenize`]. Fails on ids above 255 or on byte sequences
/// that are not UTF-8.
pub fn detokenize(tokens: &[usize]) -> Result<String, HarnessError> {
    let bytes = tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| HarnessError::Data(format!("token {t} is not a byte"))))
        .collect::<Result<Vec<u8>, _>>()?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Data(e.to_string()))
}

/// Like [`detokenize`] but replaces anything undecodable.
pub fn detokenize_lossy(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

/// Reads and concatenates `paths`, then holds out the last
/// `round(len * val_fraction)` bytes (at least one) for validation.
pub fn ingest_corpus<P: AsRef<Path>>(paths: &[P], val_fraction: f64) -> Result<Corpus, HarnessError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(HarnessError::Config(format!("val_fraction {val_fraction} must be in (0, 1)")));
    }
    if paths.is_empty() {
        return Err(HarnessError::Data("no corpus files given".into()));
    }
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let data = std::fs::read(p).map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))?;
        std::str::from_utf8(&data).map_err(|e| HarnessError::Data(format!("{}: not UTF-8: {e}", p.display())))?;
        bytes.extend_from_slice(&data);
    }
    if bytes.len() < 2 {
        return Err(HarnessError::Data("corpus is empty".into()));
    }
    let val_len = ((bytes.len() as f64 * val_fraction).round() as usize).clamp(1, bytes.len() - 1);
    let val = bytes.split_off(bytes.len() - val_len);
    Ok(Corpus { train: bytes, val })
}

fn widen(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| usize::from(b)).collect()
}

impl Corpus {
    /// `batch` windows of `seq_len + 1` tokens at uniformly random offsets
    /// in the training split.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        batch: usize,
        seq_len: usize,
    ) -> Result<Vec<Vec<usize>>, HarnessError> {
        let span = seq_len + 1;
        if self.train.len() < span {
            return Err(HarnessError::Data(format!(
                "training split has {} bytes, need at least {span}",
                self.train.len()
            )));
        }
        Ok((0..batch)
            .map(|_| {
                let start = rng.random_range(0..=self.train.len() - span);
                widen(&self.train[start..start + span])
            })
            .collect())
    }

    /// Up to `count` consecutive non-overlapping windows of `seq_len + 1`
    /// tokens from the start of the validation split.
    pub fn val_sequences(&self, count: usize, seq_len: usize) -> Result<Vec<Vec<usize>>, HarnessError> {
        let seqs: Vec<Vec<usize>> = self.val.chunks_exact(seq_len + 1).take(count).map(widen).collect();
        if seqs.is_empty() {
            return Err(HarnessError::Data(format!(
                "validation split has {} bytes, need at least {}",
                self.val.len(),
                seq_len + 1
            )));
        }
        Ok(seqs)
    }
}

/// Reads a prompt file or string argument into tokens.
pub fn read_prompt(path: &Path) -> Result<Vec<usize>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(tokenize(&text))
}
