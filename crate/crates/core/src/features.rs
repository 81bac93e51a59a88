//! Feature extraction for the calibrators.
//!
//! The central signal is the attention *flow*: the `[CLS]`→`[SEP]` attention
//! of one candidate read layer by layer, `A = (A_1, ..., A_N)`. Two summaries
//! of it are used as features, its Shannon entropy (after normalizing `A` to a
//! distribution over layers) and its first differences.
//!
//! [`build_features`] emits features in a frozen order, so a model trained on
//! one extraction can score another:
//!
//! | block                 | names                           | count      |
//! |-----------------------|---------------------------------|------------|
//! | query length          | `query_len`                     | 1          |
//! | answer lengths        | `top{i}_answer_len`             | k          |
//! | scores                | `top{i}_softmax`                | k          |
//! | score variance        | `softmax_var`                   | 1          |
//! | score deltas          | `softmax_delta_{jj}`            | k-1        |
//! | flow entropy          | `top{i}_flow_entropy`           | k          |
//! | flow deltas           | `top{i}_flow_delta_{jj}`        | k(N-1)     |
//! | flow mean             | `top{i}_flowmean`               | k          |
//!
//! [`FeatureSet::Base`] drops the flow entropy and flow delta blocks.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{AttentionRecord, FeatureVector, RankedQueryRecord};
use crate::error::{Error, Result};
use crate::math;

/// Name of the label column in feature CSV files.
pub const LABEL_COLUMN: &str = "label";

/// How per-head attention is reduced to one scalar per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMode {
    #[default]
    MeanHeads,
    SingleHead(usize),
}

impl FromStr for HeadMode {
    type Err = Error;

    /// Accepts `mean` or `head:<index>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(HeadMode::MeanHeads);
        }
        s.strip_prefix("head:")
            .and_then(|h| h.parse().ok())
            .map(HeadMode::SingleHead)
            .ok_or_else(|| Error::invalid(format!("head mode must be `mean` or `head:<n>`, got `{s}`")))
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadMode::MeanHeads => f.write_str("mean"),
            HeadMode::SingleHead(h) => write!(f, "head:{h}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSet {
    /// Every feature, including flow entropy and flow deltas.
    #[default]
    Full,
    /// Scores, lengths and the flow mean only.
    Base,
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FeatureSet::Full),
            "base" => Ok(FeatureSet::Base),
            _ => Err(Error::invalid(format!("feature set must be `full` or `base`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FeatureConfig {
    pub head_mode: HeadMode,
    pub feature_set: FeatureSet,
}

/// Per-layer attention values `A_1..A_N`, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFlow(Vec<f64>);

impl AttentionFlow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("attention flow needs at least one layer"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("flow value {v} is outside [0, 1]")));
        }
        Ok(AttentionFlow(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn attention_flow(rec: &AttentionRecord, mode: HeadMode) -> Result<AttentionFlow> {
    let values: Vec<f64> = match mode {
        HeadMode::MeanHeads => rec
            .cls_to_sep
            .iter()
            .map(|heads| heads.iter().sum::<f64>() / heads.len() as f64)
            .collect(),
        HeadMode::SingleHead(h) => {
            if h >= rec.num_heads {
                return Err(Error::invalid(format!(
                    "head {h} out of range for {} heads",
                    rec.num_heads
                )));
            }
            rec.cls_to_sep.iter().map(|heads| heads[h]).collect()
        }
    };
    // the mean of values in [0, 1] can round a hair past 1
    AttentionFlow::new(values.into_iter().map(|v: f64| v.min(1.0)).collect())
}

/// Shannon entropy (nats) of the flow normalized to a distribution over
/// layers. Lies in `[0, ln N]`.
pub fn flow_entropy(flow: &AttentionFlow) -> Result<f64> {
    shannon_entropy(flow.values())
}

/// Entropy of `weights / sum(weights)`, with `0 ln 0 = 0`.
pub fn shannon_entropy(weights: &[f64]) -> Result<f64> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::invalid(format!("entropy weight {w} is negative or non-finite")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::degenerate("entropy of an all-zero flow is undefined"));
    }
    let h = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// First differences `x[i+1] - x[i]`.
pub fn delta_scores(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::invalid(format!(
            "deltas need at least 2 values, got {}",
            xs.len()
        )));
    }
    Ok(xs.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Population variance (divides by k).
pub fn topk_variance(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::invalid(format!(
            "variance needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    let mean = math::mean(scores);
    Ok(scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64)
}

/// Stable feature names for `k` candidates with `num_layers` flow steps.
pub fn feature_names(k: usize, num_layers: usize, config: &FeatureConfig) -> Vec<String> {
    let ranks = 1..=k;
    let mut names = vec!["query_len".to_string()];
    names.extend(ranks.clone().map(|i| format!("top{i}_answer_len")));
    names.extend(ranks.clone().map(|i| format!("top{i}_softmax")));
    names.push("softmax_var".into());
    names.extend((1..k).map(|j| format!("softmax_delta_{j:02}")));
    if config.feature_set == FeatureSet::Full {
        names.extend(ranks.clone().map(|i| format!("top{i}_flow_entropy")));
        for i in ranks.clone() {
            names.extend((1..num_layers).map(|j| format!("top{i}_flow_delta_{j:02}")));
        }
    }
    names.extend(ranks.map(|i| format!("top{i}_flowmean")));
    names
}

pub fn build_features(rec: &RankedQueryRecord, config: &FeatureConfig) -> Result<FeatureVector> {
    let k = rec.candidates.len();
    let scores = rec.scores();

    let mut flows = Vec::with_capacity(k);
    for (index, c) in rec.candidates.iter().enumerate() {
        let flow = attention_flow(&c.attention, config.head_mode).map_err(|e| Error::Candidate {
            index,
            source: Box::new(e),
        })?;
        flows.push(flow);
    }
    let num_layers = flows.first().map_or(0, AttentionFlow::len);

    let mut values = Vec::with_capacity(feature_names(k, num_layers, config).len());
    values.push(f64::from(rec.query_token_length));
    values.extend(rec.candidates.iter().map(|c| f64::from(c.answer_token_length)));
    values.extend_from_slice(&scores);
    values.push(topk_variance(&scores)?);
    if k >= 2 {
        values.extend(delta_scores(&scores)?);
    }
    if config.feature_set == FeatureSet::Full {
        for (index, flow) in flows.iter().enumerate() {
            let h = flow_entropy(flow).map_err(|e| Error::Candidate {
                index,
                source: Box::new(e),
            })?;
            values.push(h);
        }
        if num_layers >= 2 {
            for flow in &flows {
                values.extend(delta_scores(flow.values())?);
            }
        }
    }
    values.extend(flows.iter().map(|f| math::mean(f.values())));

    FeatureVector::new(feature_names(k, num_layers, config), values)
}

/// Dense row-major feature matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    data: Vec<f64>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = names.len();
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} values, expected {n_cols}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i} has a non-finite value")));
            }
            data.extend_from_slice(row);
        }
        Ok(FeatureMatrix {
            names,
            data,
            n_rows: rows.len(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_cols();
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.get(r, col)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.n_cols());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            names: self.names.clone(),
            data,
            n_rows: indices.len(),
        }
    }

    /// Keeps the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| Error::Incompatible(format!("feature {n} is missing")))
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.n_rows * idx.len());
        for r in 0..self.n_rows {
            data.extend(idx.iter().map(|&c| self.get(r, c)));
        }
        Ok(FeatureMatrix {
            names: names.to_vec(),
            data,
            n_rows: self.n_rows,
        })
    }
}

/// Extracts features for every record. Records are processed in parallel;
/// output order follows input order. All records must share `k` and the
/// number of layers.
pub fn build_feature_matrix(
    records: &[RankedQueryRecord],
    config: &FeatureConfig,
) -> Result<FeatureMatrix> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no records to extract features from"))?;
    let k = first.candidates.len();
    let layers = first.candidates[0].attention.num_layers;
    let names = feature_names(k, layers, config);
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|rec| {
            let fv = build_features(rec, config).map_err(|e| Error::InvalidRecord {
                query_id: rec.query_id.clone(),
                message: e.to_string(),
            })?;
            if fv.names() != names.as_slice() {
                return Err(Error::InvalidRecord {
                    query_id: rec.query_id.clone(),
                    message: format!(
                        "feature layout differs from the first record (k={k}, layers={layers})"
                    ),
                });
            }
            Ok(fv.into_values())
        })
        .collect::<Result<_>>()?;
    FeatureMatrix::from_rows(names, &rows)
}

/// Writes the header (feature names then `label`) and one row per record.
pub fn write_feature_csv<W: Write>(out: W, matrix: &FeatureMatrix, labels: &[bool]) -> Result<()> {
    if labels.len() != matrix.n_rows() {
        return Err(Error::invalid("label count differs from row count"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(matrix.names().iter().map(String::as_str).chain([LABEL_COLUMN]))
        .map_err(csv_err)?;
    for (row, &label) in matrix.rows().zip(labels) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(u8::from(label).to_string());
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_csv<R: Read>(input: R) -> Result<(FeatureMatrix, Vec<bool>)> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let label_col = header
        .iter()
        .position(|h| h == LABEL_COLUMN)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("feature CSV has no `{LABEL_COLUMN}` column"),
        })?;
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_col)
        .map(|(_, h)| h.clone())
        .collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(names.len());
        for (i, field) in rec.iter().enumerate() {
            if i == label_col {
                labels.push(match field {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("label must be 0 or 1, found `{other}`"),
                        })
                    }
                });
            } else {
                row.push(field.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("column {}: {e}", header[i]),
                })?);
            }
        }
        rows.push(row);
    }
    let matrix = FeatureMatrix::from_rows(names, &rows)?;
    Ok((matrix, labels))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Row-wise `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_weights(q: &[Vec<f64>], k: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d_k = check_width(q, "Q")?;
    if k.is_empty() || check_width(k, "K")? != d_k {
        return Err(Error::invalid("Q and K must share the key dimension"));
    }
    let scale = (d_k as f64).sqrt();
    Ok(q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale)
                .collect();
            math::softmax(&logits)
        })
        .collect())
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V`.
pub fn reference_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if v.len() != k.len() {
        return Err(Error::invalid(format!(
            "V has {} rows but K has {}",
            v.len(),
            k.len()
        )));
    }
    let d_v = check_width(v, "V")?;
    let weights = attention_weights(q, k)?;
    Ok(weights
        .iter()
        .map(|w| {
            (0..d_v)
                .map(|c| w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum())
                .collect()
        })
        .collect())
}

fn check_width(m: &[Vec<f64>], what: &str) -> Result<usize> {
    let width = m
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid(format!("{what} is empty")))?;
    if width == 0 || m.iter().any(|r| r.len() != width) {
        return Err(Error::invalid(format!("{what} rows must share a positive width")));
    }
    Ok(width)
}
