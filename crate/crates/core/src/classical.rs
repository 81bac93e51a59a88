//! Post-hoc baselines: Platt scaling, temperature scaling and isotonic
//! regression.
//!
//! All three are fit by minimizing a loss on held-out data with the ranker
//! frozen. Platt and temperature minimize negative log-likelihood; isotonic
//! regression minimizes squared error under a monotonicity constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, clamp_prob, log_sum_exp, sigmoid, softplus};

/// Bound on |a| and |b| when the data are perfectly separable.
pub const PLATT_COEF_LIMIT: f64 = 30.0;
const PLATT_MAX_ITER: usize = 100;
const PLATT_GRAD_TOL: f64 = 1e-8;

/// Search range for the temperature.
pub const T_MIN: f64 = 1e-2;
pub const T_MAX: f64 = 1e2;
/// Golden-section stops once the bracket in `ln T` is narrower than this;
/// at `T = 100` it corresponds to an absolute width of 1e-6.
const LOG_T_TOL: f64 = 1e-8;

/// `q = sigmoid(a z + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlattFit {
    pub model: Platt,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Set when a coefficient hit [`PLATT_COEF_LIMIT`] (separable data).
    pub clamped: bool,
}

impl PlattFit {
    pub fn warning(&self) -> Option<String> {
        self.clamped.then(|| {
            format!(
                "data look separable; coefficients clamped at |a|,|b| <= {PLATT_COEF_LIMIT}"
            )
        })
    }
}

impl Platt {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::invalid("platt coefficients must be finite"));
        }
        Ok(())
    }

    pub fn apply(&self, z: f64) -> f64 {
        apply_platt(self, z)
    }
}

pub fn apply_platt(m: &Platt, z: f64) -> f64 {
    clamp_prob(sigmoid(m.a * z + m.b))
}

/// Mean binary NLL of `sigmoid(a z + b)`.
pub fn platt_nll(logits: &[f64], labels: &[bool], a: f64, b: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let s = a * z + b;
            softplus(s) - if y { s } else { 0.0 }
        })
        .sum();
    total / logits.len() as f64
}

fn check_binary(labels: &[bool]) -> Result<f64> {
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::degenerate("labels contain a single class"));
    }
    Ok(positives as f64 / labels.len() as f64)
}

/// True when some threshold on `z` splits the classes perfectly.
fn is_separable(logits: &[f64], labels: &[bool]) -> bool {
    let range = |want: bool| {
        logits
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == want)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&z, _)| (lo.min(z), hi.max(z)))
    };
    let (pos_lo, pos_hi) = range(true);
    let (neg_lo, neg_hi) = range(false);
    neg_hi < pos_lo || pos_hi < neg_lo
}

/// Newton's method with step halving on the mean NLL.
pub fn fit_platt(logits: &[f64], labels: &[bool]) -> Result<PlattFit> {
    if logits.len() != labels.len() {
        return Err(Error::invalid("logits and labels differ in length"));
    }
    if logits.len() < 2 {
        return Err(Error::invalid("platt scaling needs at least 2 samples"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let base_rate = check_binary(labels)?;
    let base = Platt {
        a: 0.0,
        b: math::logit(base_rate),
    };
    if logits.iter().all(|&z| z == logits[0]) {
        // slope is unidentifiable
        return Ok(PlattFit {
            model: base,
            iterations: 0,
            gradient_norm: 0.0,
            clamped: false,
        });
    }

    // No finite minimizer under perfect separation: keep stepping until the
    // coefficient box stops the solver.
    let separable = is_separable(logits, labels);
    let n = logits.len() as f64;
    let (mut a, mut b) = (base.a, base.b);
    let mut nll = platt_nll(logits, labels, a, b);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < PLATT_MAX_ITER {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&z, &y) in logits.iter().zip(labels) {
            let p = sigmoid(a * z + b);
            let r = p - f64::from(u8::from(y));
            let w = p * (1.0 - p);
            ga += r * z;
            gb += r;
            haa += w * z * z;
            hab += w * z;
            hbb += w;
        }
        let (ga, gb, haa, hab, hbb) = (ga / n, gb / n, haa / n, hab / n, hbb / n);
        grad_norm = ga.hypot(gb);
        if grad_norm <= PLATT_GRAD_TOL && !separable {
            break;
        }
        iterations += 1;
        // a small ridge keeps the solve defined when the hessian degenerates
        let ridge = 1e-12;
        let (haa, hbb) = (haa + ridge, hbb + ridge);
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 0.0 && det.is_finite() {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            (ga, gb)
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let na = (a - step * da).clamp(-PLATT_COEF_LIMIT, PLATT_COEF_LIMIT);
            let nb = (b - step * db).clamp(-PLATT_COEF_LIMIT, PLATT_COEF_LIMIT);
            let candidate = platt_nll(logits, labels, na, nb);
            if candidate <= nll && (na != a || nb != b) {
                moved = true;
                a = na;
                b = nb;
                nll = candidate;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let clamped = separable || a.abs() >= PLATT_COEF_LIMIT || b.abs() >= PLATT_COEF_LIMIT;
    Ok(PlattFit {
        model: Platt { a, b },
        iterations,
        gradient_norm: grad_norm,
        clamped,
    })
}

/// Softmax of logits divided by `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub t: f64,
}

impl Temperature {
    pub fn validate(&self) -> Result<()> {
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.t)));
        }
        Ok(())
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        apply_temperature(self, z)
    }
}

pub fn apply_temperature(m: &Temperature, z: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / m.t).collect();
    math::softmax(&scaled)
}

/// Mean multiclass NLL of `softmax(z / t)`.
pub fn temperature_nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut scaled = Vec::new();
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            scaled.clear();
            scaled.extend(z.iter().map(|v| v / t));
            log_sum_exp(&scaled) - scaled[y]
        })
        .sum();
    total / logits.len() as f64
}

/// Golden-section search over `ln T` in `[ln T_MIN, ln T_MAX]`. The NLL is
/// convex in `1/T`, hence unimodal in `ln T`.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<Temperature> {
    if logits.len() != labels.len() {
        return Err(Error::invalid("logit vectors and labels differ in length"));
    }
    if logits.len() < 2 {
        return Err(Error::invalid("temperature scaling needs at least 2 samples"));
    }
    let classes = logits[0].len();
    if classes < 2 {
        return Err(Error::invalid("temperature scaling needs at least 2 classes"));
    }
    for (z, &y) in logits.iter().zip(labels) {
        if z.len() != classes {
            return Err(Error::invalid("logit vectors differ in length"));
        }
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
    }

    let f = |u: f64| temperature_nll(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (T_MIN.ln(), T_MAX.ln());
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > LOG_T_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    let mut best = (mid.exp(), f(mid));
    for t in [T_MIN, T_MAX, 1.0] {
        let v = temperature_nll(logits, labels, t);
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(Temperature { t: best.0 })
}

/// Logits recovered from top-k probabilities: `ln p_i` for each score plus a
/// residual class holding `1 - sum(p)`. Probabilities are clamped away from
/// zero first.
pub fn pseudo_logits(scores: &[f64]) -> Vec<f64> {
    let residual = 1.0 - scores.iter().sum::<f64>();
    scores
        .iter()
        .chain(std::iter::once(&residual))
        .map(|&p| p.max(math::PROB_EPS).ln())
        .collect()
}

/// Monotone step function: `values[m]` on `[boundaries[m], boundaries[m+1])`,
/// last bin right-closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Isotonic {
    pub boundaries: Vec<f64>,
    pub values: Vec<f64>,
}

impl Isotonic {
    pub fn validate(&self) -> Result<()> {
        let m = self.values.len();
        if m == 0 || self.boundaries.len() != m + 1 {
            return Err(Error::invalid("isotonic model needs M values and M+1 boundaries"));
        }
        if self.boundaries[0] != 0.0 || self.boundaries[m] != 1.0 {
            return Err(Error::invalid("isotonic boundaries must start at 0 and end at 1"));
        }
        if self.boundaries.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("isotonic boundaries must be sorted"));
        }
        if self.values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("isotonic values must be non-decreasing"));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("isotonic values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn apply(&self, p: f64) -> f64 {
        apply_isotonic(self, p)
    }
}

pub fn apply_isotonic(m: &Isotonic, p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let interior = &m.boundaries[1..m.values.len()];
    let bin = interior.partition_point(|&b| b <= p);
    m.values[bin].clamp(0.0, 1.0)
}

pub fn fit_isotonic(scores: &[f64], labels: &[bool]) -> Result<Isotonic> {
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(u8::from(y))).collect();
    fit_isotonic_targets(scores, &targets)
}

/// Pool-adjacent-violators on real targets in `[0, 1]`. Samples with equal
/// scores are pooled before the pass, so the fit is a function of the score.
pub fn fit_isotonic_targets(scores: &[f64], targets: &[f64]) -> Result<Isotonic> {
    if scores.len() != targets.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("isotonic regression needs at least one sample"));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid(format!("score {s} is outside [0, 1]")));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("target {t} is outside [0, 1]")));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    struct Block {
        lo: f64,
        sum: f64,
        weight: f64,
    }
    impl Block {
        fn mean(&self) -> f64 {
            self.sum / self.weight
        }
    }

    let mut blocks: Vec<Block> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block = Block {
            lo: s,
            sum: 0.0,
            weight: 0.0,
        };
        while i < order.len() && scores[order[i]] == s {
            block.sum += targets[order[i]];
            block.weight += 1.0;
            i += 1;
        }
        while let Some(prev) = blocks.last() {
            if prev.mean() < block.mean() {
                break;
            }
            let prev = blocks.pop().expect("non-empty");
            block = Block {
                lo: prev.lo,
                sum: prev.sum + block.sum,
                weight: prev.weight + block.weight,
            };
        }
        blocks.push(block);
    }

    let mut boundaries = Vec::with_capacity(blocks.len() + 1);
    boundaries.push(0.0);
    boundaries.extend(blocks.iter().skip(1).map(|b| b.lo));
    boundaries.push(1.0);
    let values = blocks.iter().map(|b| b.mean().clamp(0.0, 1.0)).collect();
    Ok(Isotonic { boundaries, values })
}
