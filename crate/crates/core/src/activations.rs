//! Activation and logit dump formats (JSONL) and Z-score normalization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are treated as zero.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Single,
    PairPos,
    PairNeg,
    Pair,
    List,
}

/// Either one item index or an ordered `(a, b)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemRef {
    Single(usize),
    Pair([usize; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub task_id: String,
    pub item_index: ItemRef,
    pub prompt_variant: PromptVariant,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub request_id: String,
    pub task_id: String,
    pub prompt_variant: PromptVariant,
    pub candidate_logits: BTreeMap<String, f64>,
}

impl LogitRecord {
    pub fn logit(&self, token: &str) -> Result<f64> {
        self.candidate_logits
            .get(token)
            .copied()
            .ok_or_else(|| Error::MissingCandidate {
                record: self.request_id.clone(),
                token: token.to_string(),
            })
    }
}

/// Sidecar describing where a dump came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub model: String,
    pub layer: String,
    pub dimension: usize,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dump {
    Activations(Vec<ActivationRecord>),
    Logits(Vec<LogitRecord>),
}

/// Reads either dump type, deciding by the first record's fields.
pub fn read_dump(path: impl AsRef<Path>) -> Result<Dump> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let first = BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .find(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .transpose()?;
    match first {
        None => Ok(Dump::Activations(Vec::new())),
        Some(line) if line.contains("\"candidate_logits\"") => Ok(Dump::Logits(read_logits(path)?)),
        Some(_) => Ok(Dump::Activations(read_activations(path)?)),
    }
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<Vec<ActivationRecord>> {
    let path = path.as_ref();
    let records: Vec<ActivationRecord> = read_jsonl(path)?;
    validate_activations(&records, &path.display().to_string())?;
    Ok(records)
}

pub fn read_logits(path: impl AsRef<Path>) -> Result<Vec<LogitRecord>> {
    let path = path.as_ref();
    let records: Vec<LogitRecord> = read_jsonl(path)?;
    validate_logits(&records)?;
    Ok(records)
}

pub fn write_activations(path: impl AsRef<Path>, records: &[ActivationRecord]) -> Result<()> {
    validate_activations(records, "output")?;
    write_jsonl(path, records)
}

pub fn write_logits(path: impl AsRef<Path>, records: &[LogitRecord]) -> Result<()> {
    validate_logits(records)?;
    write_jsonl(path, records)
}

/// Every vector has the same dimension and only finite entries.
pub fn validate_activations(records: &[ActivationRecord], source_name: &str) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let dim = first.vector.len();
    for (i, rec) in records.iter().enumerate() {
        let name = || format!("{source_name} record {i} (task {}, {:?})", rec.task_id, rec.item_index);
        if rec.vector.len() != dim {
            return Err(Error::Dimension {
                context: name(),
                expected: dim,
                got: rec.vector.len(),
            });
        }
        if rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name()));
        }
    }
    Ok(())
}

fn validate_logits(records: &[LogitRecord]) -> Result<()> {
    for rec in records {
        if rec.candidate_logits.is_empty() {
            return Err(Error::Validation(format!(
                "logit record {} has no candidates",
                rec.request_id
            )));
        }
        if rec.candidate_logits.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit record {}", rec.request_id)));
        }
    }
    Ok(())
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            record: i,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-dimension Z-scores with population statistics. Dimensions whose
/// standard deviation falls below [`STD_FLOOR`] become all zeros.
pub fn z_normalize(batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "z-normalization needs at least 2 vectors, got {}",
            batch.len()
        )));
    }
    let dim = batch[0].len();
    if let Some(bad) = batch.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension {
            context: "z-normalization batch".into(),
            expected: dim,
            got: bad.len(),
        });
    }
    let n = batch.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in batch {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; dim];
    for v in batch {
        for ((s, x), m) in std.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n).sqrt());

    Ok(batch
        .iter()
        .map(|v| {
            v.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((x, m), s)| if *s < STD_FLOOR { 0.0 } else { (x - m) / s })
                .collect()
        })
        .collect())
}

/// Normalizes the positive and negative prompt classes separately so the
/// "Yes" and "No" clusters collapse onto each other.
pub fn normalize_contrast_classes(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if pos.len() != neg.len() {
        return Err(Error::InvalidArgument(format!(
            "contrast classes differ in size: {} vs {}",
            pos.len(),
            neg.len()
        )));
    }
    Ok((z_normalize(pos)?, z_normalize(neg)?))
}
