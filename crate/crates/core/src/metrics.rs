//! Calibration and discrimination metrics.
//!
//! Reliability binning uses `M` equal-width bins over `[0, 1]`, with the last
//! bin closed at 1. ACE weights each bin's |accuracy - confidence| gap by its
//! share of samples; MCE takes the largest gap over non-empty bins.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::clamp_prob;

/// Default number of reliability bins.
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence, 0 when empty.
    pub conf: f64,
    /// Fraction of positive labels, 0 when empty.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedReliability {
    pub bins: Vec<ReliabilityBin>,
    pub n: usize,
}

impl BinnedReliability {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn non_empty(&self) -> impl Iterator<Item = &ReliabilityBin> {
        self.bins.iter().filter(|b| b.count > 0)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} scores but {b} labels")));
    }
    Ok(())
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid(format!(
            "probability {} at position {i} is outside [0, 1]",
            probs[i]
        )));
    }
    Ok(())
}

/// Bin index of a confidence in `[0, 1]`.
pub fn bin_index(conf: f64, num_bins: usize) -> usize {
    ((conf * num_bins as f64).floor() as usize).min(num_bins - 1)
}

pub fn bin_reliability(confidences: &[f64], labels: &[bool], num_bins: usize) -> Result<BinnedReliability> {
    check_lengths(confidences.len(), labels.len())?;
    if confidences.is_empty() {
        return Err(Error::invalid("cannot bin an empty sample"));
    }
    if num_bins == 0 {
        return Err(Error::invalid("number of bins must be positive"));
    }
    check_probs(confidences)?;
    let mut sums = vec![(0usize, 0.0f64, 0usize); num_bins];
    for (&c, &y) in confidences.iter().zip(labels) {
        let s = &mut sums[bin_index(c, num_bins)];
        s.0 += 1;
        s.1 += c;
        s.2 += usize::from(y);
    }
    let m = num_bins as f64;
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, conf_sum, pos))| {
            let (conf, acc) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum / count as f64, pos as f64 / count as f64)
            };
            ReliabilityBin {
                lo: i as f64 / m,
                hi: (i + 1) as f64 / m,
                count,
                conf,
                acc,
            }
        })
        .collect();
    Ok(BinnedReliability {
        bins,
        n: confidences.len(),
    })
}

pub fn ace(b: &BinnedReliability) -> f64 {
    let n = b.n as f64;
    b.non_empty()
        .map(|bin| bin.count as f64 / n * (bin.acc - bin.conf).abs())
        .sum()
}

pub fn mce(b: &BinnedReliability) -> Result<f64> {
    b.non_empty()
        .map(|bin| (bin.acc - bin.conf).abs())
        .fold(None, |acc: Option<f64>, gap| Some(acc.map_or(gap, |a| a.max(gap))))
        .ok_or_else(|| Error::degenerate("all reliability bins are empty"))
}

/// One ROC vertex: predicting positive for every score `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `(+inf, 0, 0)` down to `(min score, 1, 1)`, one vertex per
    /// distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve and AUC with ties counted one half.
///
/// The AUC is `(2 C + T) / (2 P N)` over integer pair counts, which equals
/// the trapezoid area of the tie-grouped curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score at position {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&y| y).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::degenerate("ROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // Positives and negatives strictly above the current group.
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut concordant, mut ties) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // Every negative in this group is outranked by the positives above.
        concordant += u128::from(gn) * u128::from(tp);
        ties += u128::from(gn) * u128::from(gp);
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = (2 * concordant + ties) as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64;
    Ok(RocCurve { points, auc })
}

pub fn nll(probs: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::invalid("NLL of an empty sample"));
    }
    check_probs(probs)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn brier(probs: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::invalid("Brier score of an empty sample"));
    }
    check_probs(probs)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - f64::from(u8::from(y))).powi(2))
        .sum();
    Ok(total / probs.len() as f64)
}

/// Summary written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ace: f64,
    pub mce: f64,
    pub auc: f64,
    pub nll: f64,
    pub brier: f64,
    pub n: usize,
    pub m_bins: usize,
}

/// Everything `eval` produces for one set of probabilities.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub reliability: BinnedReliability,
    pub roc: RocCurve,
}

pub fn evaluate(probs: &[f64], labels: &[bool], num_bins: usize) -> Result<Evaluation> {
    let reliability = bin_reliability(probs, labels, num_bins)?;
    let roc = roc_auc(probs, labels)?;
    let report = EvalReport {
        ace: ace(&reliability),
        mce: mce(&reliability)?,
        auc: roc.auc,
        nll: nll(probs, labels)?,
        brier: brier(probs, labels)?,
        n: probs.len(),
        m_bins: num_bins,
    };
    Ok(Evaluation {
        report,
        reliability,
        roc,
    })
}

pub fn write_reliability_csv<W: Write>(mut out: W, b: &BinnedReliability) -> Result<()> {
    writeln!(out, "bin_lo,bin_hi,count,conf,acc")?;
    for bin in &b.bins {
        writeln!(out, "{},{},{},{},{}", bin.lo, bin.hi, bin.count, bin.conf, bin.acc)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(mut out: W, roc: &RocCurve) -> Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in &roc.points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    out.flush()?;
    Ok(())
}
