//! The serialized calibrator union and the glue that fits or applies any
//! calibrator to ranked records or to a feature table.
//!
//! Classical calibrators act on one scalar score per query, chosen by a
//! [`ScoreTarget`]:
//!
//! - `topk`: the summed top-k softmax mass, labeled by the record label
//!   (some correct answer among the top k).
//! - `rank:j`: the score of the j-th ranked candidate, labeled by that
//!   candidate's own correctness. `rank:1` is the usual max-probability
//!   confidence.
//!
//! Temperature scaling rescales the whole top-k softmax (plus a residual
//! class for the missing mass) and then reads the target back out. The GBM
//! uses the full feature vector and always predicts the record label.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classical::{self, Isotonic, Platt, Temperature};
use crate::data::RankedQueryRecord;
use crate::error::{Error, Result};
use crate::features::{build_feature_matrix, FeatureConfig, FeatureMatrix, FeatureSet};
use crate::gbm::{self, GbmConfig, GbmEnsemble};
use crate::math::{self, clamp_prob};
use crate::metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CalibratorModel {
    Platt(Platt),
    Temperature(Temperature),
    Isotonic(Isotonic),
    Gbm(GbmEnsemble),
}

impl CalibratorModel {
    pub fn method(&self) -> Method {
        match self {
            CalibratorModel::Platt(_) => Method::Platt,
            CalibratorModel::Temperature(_) => Method::Temperature,
            CalibratorModel::Isotonic(_) => Method::Isotonic,
            CalibratorModel::Gbm(_) => Method::Gbm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CalibratorModel::Platt(m) => m.validate(),
            CalibratorModel::Temperature(m) => m.validate(),
            CalibratorModel::Isotonic(m) => m.validate(),
            CalibratorModel::Gbm(m) => m.validate(),
        }
    }

    /// Parses and validates a model document.
    pub fn from_json(text: &str) -> Result<Self> {
        let model: CalibratorModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Platt,
    Temperature,
    Isotonic,
    Gbm,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "platt" => Ok(Method::Platt),
            "temperature" => Ok(Method::Temperature),
            "isotonic" => Ok(Method::Isotonic),
            "gbm" => Ok(Method::Gbm),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected platt, temperature, isotonic or gbm)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Platt => "platt",
            Method::Temperature => "temperature",
            Method::Isotonic => "isotonic",
            Method::Gbm => "gbm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreTarget {
    #[default]
    TopK,
    /// 1-based candidate rank.
    Rank(usize),
}

impl FromStr for ScoreTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "topk" {
            return Ok(ScoreTarget::TopK);
        }
        let rank = s
            .strip_prefix("rank:")
            .and_then(|r| r.parse::<usize>().ok())
            .filter(|&r| r >= 1);
        rank.map(ScoreTarget::Rank).ok_or_else(|| {
            Error::invalid(format!("unknown target `{s}` (expected topk or rank:J with J >= 1)"))
        })
    }
}

impl fmt::Display for ScoreTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreTarget::TopK => f.write_str("topk"),
            ScoreTarget::Rank(j) => write!(f, "rank:{j}"),
        }
    }
}

/// Labeled input to fitting or evaluation.
#[derive(Debug, Clone)]
pub enum CalibrationData {
    Records(Vec<RankedQueryRecord>),
    Features { matrix: FeatureMatrix, labels: Vec<bool> },
}

impl CalibrationData {
    pub fn len(&self) -> usize {
        match self {
            CalibrationData::Records(r) => r.len(),
            CalibrationData::Features { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keys for the fit/eval partition: query ids, or row numbers for a
    /// feature table.
    pub fn split_keys(&self) -> Vec<String> {
        match self {
            CalibrationData::Records(r) => r.iter().map(|r| r.query_id.clone()).collect(),
            CalibrationData::Features { labels, .. } => (0..labels.len()).map(|i| i.to_string()).collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> CalibrationData {
        match self {
            CalibrationData::Records(r) => CalibrationData::Records(indices.iter().map(|&i| r[i].clone()).collect()),
            CalibrationData::Features { matrix, labels } => CalibrationData::Features {
                matrix: matrix.select_rows(indices),
                labels: indices.iter().map(|&i| labels[i]).collect(),
            },
        }
    }

    /// Record-level labels (some correct answer in the top k).
    pub fn labels(&self) -> Vec<bool> {
        match self {
            CalibrationData::Records(r) => r.iter().map(|r| r.label).collect(),
            CalibrationData::Features { labels, .. } => labels.clone(),
        }
    }

    /// Ranked softmax scores per query.
    pub fn candidate_scores(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            CalibrationData::Records(r) => Ok(r.iter().map(RankedQueryRecord::scores).collect()),
            CalibrationData::Features { matrix, .. } => {
                let cols: Vec<usize> = (1..)
                    .map_while(|i| matrix.column_index(&format!("top{i}_softmax")))
                    .collect();
                if cols.is_empty() {
                    return Err(Error::Incompatible("feature table has no top1_softmax column".into()));
                }
                Ok((0..matrix.n_rows())
                    .map(|r| cols.iter().map(|&c| matrix.get(r, c)).collect())
                    .collect())
            }
        }
    }

    /// Full feature matrix for the GBM.
    pub fn feature_matrix(&self, features: &FeatureConfig) -> Result<FeatureMatrix> {
        let matrix = match self {
            CalibrationData::Records(r) => build_feature_matrix(r, features)?,
            CalibrationData::Features { matrix, .. } => matrix.clone(),
        };
        match features.feature_set {
            FeatureSet::Full => Ok(matrix),
            FeatureSet::Base => {
                let keep: Vec<String> = matrix
                    .names()
                    .iter()
                    .filter(|n| !is_flow_shape_feature(n))
                    .cloned()
                    .collect();
                matrix.select_columns(&keep)
            }
        }
    }
}

/// Entropy and delta features of the flow, the ones dropped by the base set.
pub fn is_flow_shape_feature(name: &str) -> bool {
    name.contains("_flow_entropy") || name.contains("_flow_delta_")
}

fn rank_index(target: ScoreTarget, k: usize) -> Result<Option<usize>> {
    match target {
        ScoreTarget::TopK => Ok(None),
        ScoreTarget::Rank(j) if j <= k => Ok(Some(j - 1)),
        ScoreTarget::Rank(j) => Err(Error::Incompatible(format!("target rank:{j} but only {k} candidates"))),
    }
}

/// Uncalibrated target score and its label per query.
pub fn target_scores(data: &CalibrationData, target: ScoreTarget) -> Result<(Vec<f64>, Vec<bool>)> {
    let scores = data.candidate_scores()?;
    let labels = target_labels(data, target)?;
    let k = scores.first().map_or(0, Vec::len);
    let rank = rank_index(target, k)?;
    let values = scores
        .iter()
        .map(|s| match rank {
            None => s.iter().sum::<f64>().min(1.0),
            Some(j) => s[j],
        })
        .collect();
    Ok((values, labels))
}

fn target_labels(data: &CalibrationData, target: ScoreTarget) -> Result<Vec<bool>> {
    match (target, data) {
        (ScoreTarget::TopK, _) => Ok(data.labels()),
        (ScoreTarget::Rank(j), CalibrationData::Records(records)) => records
            .iter()
            .map(|r| {
                let c = r.candidates.get(j - 1).ok_or_else(|| {
                    Error::Incompatible(format!("target rank:{j} but only {} candidates", r.candidates.len()))
                })?;
                c.is_correct.ok_or_else(|| {
                    Error::Incompatible(format!(
                        "query {}: rank targets need per-candidate is_correct flags",
                        r.query_id
                    ))
                })
            })
            .collect(),
        (ScoreTarget::Rank(_), CalibrationData::Features { .. }) => Err(Error::Incompatible(
            "rank targets need ranked records with is_correct flags, not a feature table".into(),
        )),
    }
}

/// Pseudo-logits and the index of the first correct candidate (k when none
/// is correct), for temperature scaling.
pub fn temperature_inputs(data: &CalibrationData) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let CalibrationData::Records(records) = data else {
        return Err(Error::Incompatible(
            "temperature scaling needs ranked records with is_correct flags, not a feature table".into(),
        ));
    };
    let mut logits = Vec::with_capacity(records.len());
    let mut classes = Vec::with_capacity(records.len());
    for r in records {
        if !r.has_correctness_flags() {
            return Err(Error::Incompatible(format!(
                "query {}: temperature scaling needs per-candidate is_correct flags",
                r.query_id
            )));
        }
        let k = r.candidates.len();
        logits.push(classical::pseudo_logits(&r.scores()));
        classes.push(r.correct_index()?.unwrap_or(k));
    }
    Ok((logits, classes))
}

/// Temperature-scaled target probability for one query's ranked scores.
pub fn temperature_target(m: &Temperature, scores: &[f64], target: ScoreTarget) -> Result<f64> {
    let p = m.apply(&classical::pseudo_logits(scores));
    let k = scores.len();
    Ok(match rank_index(target, k)? {
        None => p[..k].iter().sum::<f64>().min(1.0),
        Some(j) => p[j],
    })
}

/// Calibrated probabilities, one per query, in input order.
pub fn predict(
    model: &CalibratorModel,
    data: &CalibrationData,
    target: ScoreTarget,
    features: &FeatureConfig,
) -> Result<Vec<f64>> {
    match model {
        CalibratorModel::Platt(m) => {
            let (s, _) = target_scores(data, target)?;
            Ok(s.iter().map(|&p| m.apply(math::logit(p))).collect())
        }
        CalibratorModel::Isotonic(m) => {
            let (s, _) = target_scores(data, target)?;
            Ok(s.iter().map(|&p| m.apply(p)).collect())
        }
        CalibratorModel::Temperature(m) => data
            .candidate_scores()?
            .iter()
            .map(|s| temperature_target(m, s, target))
            .collect(),
        CalibratorModel::Gbm(m) => {
            gbm_target(target)?;
            let full = FeatureConfig {
                feature_set: FeatureSet::Full,
                ..*features
            };
            let matrix = data.feature_matrix(&full)?.select_columns(&m.feature_names)?;
            gbm::predict_batch(m, &matrix)
        }
    }
}

/// Labels matching [`predict`]'s output for `model`.
pub fn labels_for(model: &CalibratorModel, data: &CalibrationData, target: ScoreTarget) -> Result<Vec<bool>> {
    match model {
        CalibratorModel::Gbm(_) => {
            gbm_target(target)?;
            Ok(data.labels())
        }
        _ => target_labels(data, target),
    }
}

fn gbm_target(target: ScoreTarget) -> Result<()> {
    if target != ScoreTarget::TopK {
        return Err(Error::Incompatible(format!(
            "the gbm calibrator predicts the record label; target {target} is not supported"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub features: FeatureConfig,
    pub gbm: GbmConfig,
}

/// Training report printed by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: String,
    pub target: String,
    pub n: usize,
    pub positives: usize,
    /// NLL of the uncalibrated target score, when the data has one.
    pub nll_before: Option<f64>,
    pub nll_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: CalibratorModel,
    pub summary: FitSummary,
    /// Training NLL after each boosting round (GBM only).
    pub train_nll: Vec<f64>,
}

pub fn fit_calibrator(
    method: Method,
    data: &CalibrationData,
    target: ScoreTarget,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    if method == Method::Gbm {
        gbm_target(target)?;
    }
    let labels = match method {
        Method::Gbm => data.labels(),
        _ => target_labels(data, target)?,
    };
    let positives = labels.iter().filter(|&&y| y).count();
    if labels.is_empty() {
        return Err(Error::invalid("no rows to fit on"));
    }
    if positives == 0 || positives == labels.len() {
        return Err(Error::degenerate(format!(
            "all {} fit labels are {}",
            labels.len(),
            u8::from(positives > 0)
        )));
    }
    let nll_before = target_scores(data, target)
        .ok()
        .map(|(s, y)| metrics::nll(&s, &y))
        .transpose()?;

    let mut warnings = Vec::new();
    let mut rounds = None;
    let mut train_nll = Vec::new();
    let model = match method {
        Method::Platt => {
            let (s, y) = target_scores(data, target)?;
            let z: Vec<f64> = s.iter().map(|&p| math::logit(p)).collect();
            let fit = classical::fit_platt(&z, &y)?;
            warnings.extend(fit.warning());
            rounds = Some(fit.iterations);
            CalibratorModel::Platt(fit.model)
        }
        Method::Temperature => {
            let (z, classes) = temperature_inputs(data)?;
            let m = classical::fit_temperature(&z, &classes)?;
            if m.t <= classical::T_MIN || m.t >= classical::T_MAX {
                warnings.push(format!("temperature {} sits on the search boundary", m.t));
            }
            CalibratorModel::Temperature(m)
        }
        Method::Isotonic => {
            let (s, y) = target_scores(data, target)?;
            CalibratorModel::Isotonic(classical::fit_isotonic(&s, &y)?)
        }
        Method::Gbm => {
            let x = data.feature_matrix(&opts.features)?;
            let fit = gbm::fit_gbm(&x, &labels, &opts.gbm)?;
            rounds = Some(fit.model.trees.len());
            if fit.shrunk_rounds > 0 {
                warnings.push(format!(
                    "{} boosting rounds had leaf values shrunk to keep the training loss from rising",
                    fit.shrunk_rounds
                ));
            }
            train_nll = fit.train_nll;
            CalibratorModel::Gbm(fit.model)
        }
    };
    let probs = predict(&model, data, target, &opts.features)?;
    let nll_after = metrics::nll(&probs, &labels)?;
    Ok(FitOutcome {
        summary: FitSummary {
            method: method.to_string(),
            target: target.to_string(),
            n: labels.len(),
            positives,
            nll_before,
            nll_after,
            rounds,
            warnings,
        },
        model,
        train_nll,
    })
}

/// Clamped raw target scores, the "no calibration" baseline.
pub fn identity_probs(data: &CalibrationData, target: ScoreTarget) -> Result<(Vec<f64>, Vec<bool>)> {
    let (s, y) = target_scores(data, target)?;
    Ok((s.into_iter().map(clamp_prob).collect(), y))
}
