//! Domain records, the labeling rule and the newline-delimited JSON loader.
//!
//! One line of a record file holds one query with its top-k candidates:
//!
//! ```text
//! {"query_id": "q1", "query_token_length": 9, "label": 1,
//!  "candidates": [{"softmax_score": 0.61, "answer_token_length": 57, "is_correct": true,
//!                  "attention": {"num_layers": 12, "num_heads": 12,
//!                                "cls_to_sep": [[...], ...], "sep_index_used": 10}}, ...]}
//! ```
//!
//! `label` and `is_correct` are both optional on disk, but a record needs at
//! least one of them. When correctness flags are present the label is
//! recomputed from them and an explicit label must agree.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of one softmax row (full `cls_row` dumps).
const ROW_SUM_TOL: f64 = 1e-5;
/// Tolerance between `cls_to_sep` and the matching `cls_row` entry.
const SEP_MATCH_TOL: f64 = 1e-6;
/// Tolerance on the sum of the top-k scores of one softmax.
const SCORE_SUM_TOL: f64 = 1e-6;

/// Per-layer, per-head attention from `[CLS]` to the chosen `[SEP]` token
/// for one (query, candidate) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub num_layers: usize,
    pub num_heads: usize,
    /// `[num_layers][num_heads]`, each entry in `[0, 1]`.
    pub cls_to_sep: Vec<Vec<f64>>,
    pub sep_index_used: usize,
    /// Optional full `[CLS]` attention row, `[num_layers][num_heads][seq_len]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_row: Option<Vec<Vec<Vec<f64>>>>,
}

impl AttentionRecord {
    /// Compact record without the full attention rows.
    pub fn compact(cls_to_sep: Vec<Vec<f64>>, sep_index_used: usize) -> Result<Self> {
        let rec = AttentionRecord {
            num_layers: cls_to_sep.len(),
            num_heads: cls_to_sep.first().map_or(0, Vec::len),
            cls_to_sep,
            sep_index_used,
            cls_row: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::invalid("attention needs at least one layer and one head"));
        }
        if self.cls_to_sep.len() != self.num_layers {
            return Err(Error::invalid(format!(
                "cls_to_sep has {} layers, num_layers says {}",
                self.cls_to_sep.len(),
                self.num_layers
            )));
        }
        for (l, heads) in self.cls_to_sep.iter().enumerate() {
            if heads.len() != self.num_heads {
                return Err(Error::invalid(format!(
                    "cls_to_sep layer {l} has {} heads, num_heads says {}",
                    heads.len(),
                    self.num_heads
                )));
            }
            if let Some(h) = heads.iter().position(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::invalid(format!(
                    "cls_to_sep[{l}][{h}] = {} is outside [0, 1]",
                    heads[h]
                )));
            }
        }
        if let Some(rows) = &self.cls_row {
            self.validate_rows(rows)?;
        }
        Ok(())
    }

    fn validate_rows(&self, rows: &[Vec<Vec<f64>>]) -> Result<()> {
        if rows.len() != self.num_layers {
            return Err(Error::invalid("cls_row layer count differs from num_layers"));
        }
        for (l, layer) in rows.iter().enumerate() {
            if layer.len() != self.num_heads {
                return Err(Error::invalid(format!("cls_row layer {l} has wrong head count")));
            }
            for (h, row) in layer.iter().enumerate() {
                if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(Error::invalid(format!("cls_row[{l}][{h}] has a negative or non-finite weight")));
                }
                let sum: f64 = row.iter().sum();
                if sum > 1.0 + ROW_SUM_TOL {
                    return Err(Error::invalid(format!("cls_row[{l}][{h}] sums to {sum} > 1")));
                }
                let at_sep = row.get(self.sep_index_used).ok_or_else(|| {
                    Error::invalid(format!(
                        "sep_index_used {} is past the end of cls_row[{l}][{h}] (len {})",
                        self.sep_index_used,
                        row.len()
                    ))
                })?;
                if (at_sep - self.cls_to_sep[l][h]).abs() > SEP_MATCH_TOL {
                    return Err(Error::invalid(format!(
                        "cls_to_sep[{l}][{h}] = {} disagrees with cls_row entry {at_sep}",
                        self.cls_to_sep[l][h]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_layers, self.num_heads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub softmax_score: f64,
    pub answer_token_length: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_correct: Option<bool>,
    pub attention: AttentionRecord,
}

/// One query with its ranked candidates, sorted by score descending.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQueryRecord {
    pub query_id: String,
    pub query_token_length: u32,
    pub candidates: Vec<CandidateAnswer>,
    pub label: bool,
}

impl RankedQueryRecord {
    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.softmax_score).collect()
    }

    /// `true` when every candidate carries a correctness flag.
    pub fn has_correctness_flags(&self) -> bool {
        self.candidates.iter().all(|c| c.is_correct.is_some())
    }

    /// Index of the first correct candidate, `None` when no candidate is
    /// correct. Errors when flags are missing.
    pub fn correct_index(&self) -> Result<Option<usize>> {
        if !self.has_correctness_flags() {
            return Err(Error::InvalidRecord {
                query_id: self.query_id.clone(),
                message: "per-candidate is_correct flags are required".into(),
            });
        }
        Ok(self.candidates.iter().position(|c| c.is_correct == Some(true)))
    }

    /// Checks every record invariant for a top-`k` record.
    pub fn validate(&self, k: usize) -> Result<()> {
        let fail = |message: String| Error::InvalidRecord {
            query_id: self.query_id.clone(),
            message,
        };
        if self.candidates.len() != k {
            return Err(fail(format!(
                "expected {k} candidates, found {}",
                self.candidates.len()
            )));
        }
        let mut sum = 0.0;
        for (i, c) in self.candidates.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.softmax_score) {
                return Err(fail(format!(
                    "candidate {i} softmax_score {} is outside [0, 1]",
                    c.softmax_score
                )));
            }
            sum += c.softmax_score;
            c.attention
                .validate()
                .map_err(|e| fail(format!("candidate {i} attention: {e}")))?;
        }
        if sum > 1.0 + SCORE_SUM_TOL {
            return Err(fail(format!("top-{k} scores sum to {sum} > 1")));
        }
        let shape = self.candidates[0].attention.shape();
        if let Some(i) = self.candidates.iter().position(|c| c.attention.shape() != shape) {
            return Err(fail(format!(
                "candidate {i} attention shape {:?} differs from candidate 0 shape {:?}",
                self.candidates[i].attention.shape(),
                shape
            )));
        }
        if self
            .candidates
            .windows(2)
            .any(|w| w[0].softmax_score < w[1].softmax_score)
        {
            return Err(fail("candidates are not sorted by score".into()));
        }
        if self.has_correctness_flags() && derive_label(&self.candidates)? != self.label {
            return Err(fail("label disagrees with correctness flags".into()));
        }
        Ok(())
    }
}

/// 1 when at least one candidate is correct, 0 otherwise.
pub fn derive_label(candidates: &[CandidateAnswer]) -> Result<bool> {
    if candidates.is_empty() {
        return Err(Error::invalid("cannot derive a label from zero candidates"));
    }
    Ok(candidates.iter().any(|c| c.is_correct == Some(true)))
}

/// Named, ordered features for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} feature names but {} values",
                names.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "feature {} is not finite ({})",
                names[i], values[i]
            )));
        }
        let mut seen = HashSet::with_capacity(names.len());
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::invalid(format!("duplicate feature name {dup}")));
        }
        Ok(FeatureVector { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordWire {
    query_id: String,
    query_token_length: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    candidates: Vec<CandidateAnswer>,
}

/// Output of [`load_records`].
#[derive(Debug, Clone)]
pub struct LoadedRecords {
    pub records: Vec<RankedQueryRecord>,
    /// Number of records whose candidates had to be re-sorted by score.
    pub resorted: usize,
}

pub fn load_records(path: impl AsRef<Path>, k: usize) -> Result<LoadedRecords> {
    let file = File::open(path.as_ref())?;
    parse_records(BufReader::new(file), k)
}

/// Parses newline-delimited records. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_records(reader: impl BufRead, k: usize) -> Result<LoadedRecords> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let mut records = Vec::new();
    let mut resorted = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordWire = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let (record, was_sorted) = from_wire(wire, k).map_err(|e| match e {
            Error::InvalidRecord { .. } => e,
            other => Error::Parse {
                line: line_no,
                message: other.to_string(),
            },
        })?;
        if !was_sorted {
            resorted += 1;
        }
        records.push(record);
    }
    Ok(LoadedRecords { records, resorted })
}

fn from_wire(wire: RecordWire, k: usize) -> Result<(RankedQueryRecord, bool)> {
    let RecordWire {
        query_id,
        query_token_length,
        label,
        mut candidates,
    } = wire;
    let fail = |message: String| Error::InvalidRecord {
        query_id: query_id.clone(),
        message,
    };
    if candidates.len() != k {
        return Err(fail(format!(
            "expected {k} candidates, found {}",
            candidates.len()
        )));
    }
    if let Some(i) = candidates.iter().position(|c| !c.softmax_score.is_finite()) {
        return Err(fail(format!("candidate {i} has a non-finite score")));
    }
    let sorted = candidates
        .windows(2)
        .all(|w| w[0].softmax_score >= w[1].softmax_score);
    if !sorted {
        candidates.sort_by(|a, b| b.softmax_score.total_cmp(&a.softmax_score));
    }
    let explicit = match label {
        None => None,
        Some(0) => Some(false),
        Some(1) => Some(true),
        Some(other) => return Err(fail(format!("label must be 0 or 1, found {other}"))),
    };
    let flagged = candidates.iter().filter(|c| c.is_correct.is_some()).count();
    let label = if flagged == candidates.len() {
        let derived = derive_label(&candidates)?;
        if explicit.is_some_and(|l| l != derived) {
            return Err(fail(format!(
                "explicit label {} disagrees with correctness flags (derived {})",
                u8::from(explicit.unwrap_or_default()),
                u8::from(derived)
            )));
        }
        derived
    } else if flagged == 0 {
        explicit.ok_or_else(|| fail("record has neither a label nor is_correct flags".into()))?
    } else {
        return Err(fail("is_correct must be given for all candidates or none".into()));
    };
    let record = RankedQueryRecord {
        query_id,
        query_token_length,
        candidates,
        label,
    };
    record.validate(k)?;
    Ok((record, sorted))
}

fn to_wire(record: &RankedQueryRecord) -> RecordWire {
    RecordWire {
        query_id: record.query_id.clone(),
        query_token_length: record.query_token_length,
        label: Some(u8::from(record.label)),
        candidates: record.candidates.clone(),
    }
}

/// One JSON line, without the trailing newline.
pub fn record_to_json(record: &RankedQueryRecord) -> Result<String> {
    Ok(serde_json::to_string(&to_wire(record))?)
}

pub fn write_records<W: Write>(mut out: W, records: &[RankedQueryRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, &to_wire(record))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_records(path: impl AsRef<Path>, records: &[RankedQueryRecord]) -> Result<()> {
    write_records(BufWriter::new(File::create(path)?), records)
}
