//! Gradient-boosted decision trees with a binary logistic objective.
//!
//! Each round fits one regression tree to the first and second derivatives
//! of the logistic loss at the current margins (Newton boosting):
//!
//! ```text
//! g_i = p_i - y_i        h_i = p_i (1 - p_i)
//! gain  = 1/2 [G_L^2/(H_L+λ) + G_R^2/(H_R+λ) - (G_L+G_R)^2/(H_L+H_R+λ)] - γ
//! leaf  = -lr * G / (H + λ)
//! ```
//!
//! Splits are found by exact greedy search over every distinct feature value,
//! with midpoint thresholds and `x <= threshold` going left. Ties in gain go
//! to the lowest feature index, then the lowest threshold, so a fit is a pure
//! function of its inputs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureVector;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::math::{self, clamp_prob, sigmoid, softplus};

const NO_NODE: u32 = u32::MAX;
/// Leaf values are halved at most this many times when a round would
/// increase the training loss.
const MAX_SHRINK_STEPS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature_index: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    /// Margin contribution for one row.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { leaf_value } => return *leaf_value,
                Node::Split {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[*feature_index] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn num_splits(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Split { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Every child index points forward (so the graph is acyclic), every
    /// node is reached exactly once and leaf values are finite.
    pub fn validate(&self, num_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("tree has no nodes"));
        }
        let mut parents = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Leaf { leaf_value } => {
                    if !leaf_value.is_finite() {
                        return Err(Error::invalid(format!("leaf {i} value is not finite")));
                    }
                }
                Node::Split {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature_index >= num_features {
                        return Err(Error::invalid(format!(
                            "node {i} splits on feature {feature_index} of {num_features}"
                        )));
                    }
                    if threshold.is_nan() {
                        return Err(Error::invalid(format!("node {i} threshold is NaN")));
                    }
                    for &child in [left, right] {
                        if child <= i || child >= self.nodes.len() {
                            return Err(Error::invalid(format!("node {i} has bad child {child}")));
                        }
                        parents[child] += 1;
                    }
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::invalid("tree nodes must form a single rooted tree"));
        }
        Ok(())
    }

    fn scale_leaves(&mut self, factor: f64) {
        for node in &mut self.nodes {
            if let Node::Leaf { leaf_value } = node {
                *leaf_value *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmConfig {
    pub num_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty λ on leaf values.
    pub lambda: f64,
    /// Minimum gain γ a split must exceed.
    pub gamma: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    /// Fraction of rows sampled per round.
    pub subsample: f64,
    /// Fraction of features considered per round.
    pub colsample: f64,
    /// Stop after this many rounds without validation improvement.
    pub early_stopping_rounds: Option<usize>,
    pub rng_seed: u64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            num_rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            subsample: 1.0,
            colsample: 1.0,
            early_stopping_rounds: None,
            rng_seed: 0,
        }
    }
}

impl GbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::invalid("learning_rate must lie in (0, 1]"));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("min_child_weight", self.min_child_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a non-negative number")));
            }
        }
        for (name, v) in [("subsample", self.subsample), ("colsample", self.colsample)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1]")));
            }
        }
        if self.early_stopping_rounds == Some(0) {
            return Err(Error::invalid("early_stopping_rounds must be positive"));
        }
        Ok(())
    }
}

/// Fitted ensemble: `p(x) = sigmoid(base_score_logit + sum_t tree_t(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmEnsemble {
    pub base_score_logit: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<DecisionTree>,
}

impl GbmEnsemble {
    pub fn validate(&self) -> Result<()> {
        if !self.base_score_logit.is_finite() {
            return Err(Error::invalid("base_score_logit must be finite"));
        }
        for tree in &self.trees {
            tree.validate(self.feature_names.len())?;
        }
        Ok(())
    }

    pub fn margin(&self, row: &[f64]) -> f64 {
        let mut m = self.base_score_logit;
        for tree in &self.trees {
            m += tree.predict(row);
        }
        m
    }
}

/// Training trace returned with the model.
#[derive(Debug, Clone)]
pub struct GbmFit {
    pub model: GbmEnsemble,
    /// Mean training NLL before the first tree and after each kept round.
    pub train_nll: Vec<f64>,
    /// Final training margins, in row order.
    pub train_margins: Vec<f64>,
    /// Validation NLL per round when a validation set was supplied.
    pub valid_nll: Vec<f64>,
    /// Rounds in which leaf values had to be shrunk to keep the training
    /// loss from rising.
    pub shrunk_rounds: usize,
}

/// Gain of splitting a node into (L, R).
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

/// Mean logistic NLL of margins.
pub fn logistic_nll(margins: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| softplus(m) - if y { m } else { 0.0 })
        .sum();
    total / margins.len() as f64
}

pub fn fit_gbm(x: &FeatureMatrix, y: &[bool], cfg: &GbmConfig) -> Result<GbmFit> {
    fit_gbm_with_validation(x, y, None, cfg)
}

/// Like [`fit_gbm`], optionally tracking a validation set. Early stopping
/// only applies when both `valid` and `cfg.early_stopping_rounds` are set.
pub fn fit_gbm_with_validation(
    x: &FeatureMatrix,
    y: &[bool],
    valid: Option<(&FeatureMatrix, &[bool])>,
    cfg: &GbmConfig,
) -> Result<GbmFit> {
    cfg.validate()?;
    let n = x.n_rows();
    if y.len() != n {
        return Err(Error::invalid(format!("{n} rows but {} labels", y.len())));
    }
    if n < 2 {
        return Err(Error::invalid("boosting needs at least 2 rows"));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == n {
        return Err(Error::degenerate("labels contain a single class"));
    }
    if let Some((vx, vy)) = valid {
        if vx.names() != x.names() || vx.n_rows() != vy.len() {
            return Err(Error::invalid("validation set does not match the training layout"));
        }
    }

    let base = math::logit(positives as f64 / n as f64);
    let mut model = GbmEnsemble {
        base_score_logit: base,
        feature_names: x.names().to_vec(),
        trees: Vec::new(),
    };
    let mut margins = vec![base; n];
    let mut train_nll = vec![logistic_nll(&margins, y)];
    let mut valid_margins = valid.map(|(vx, _)| vec![base; vx.n_rows()]);
    let mut valid_nll = Vec::new();
    if let (Some(vm), Some((_, vy))) = (&valid_margins, valid) {
        valid_nll.push(logistic_nll(vm, vy));
    }
    let mut best_valid = (valid_nll.first().copied().unwrap_or(f64::INFINITY), 0usize);

    let sorted = presort(x);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut in_sample = vec![true; n];
    let mut shrunk_rounds = 0;

    for _round in 0..cfg.num_rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - f64::from(u8::from(y[i]));
            hess[i] = p * (1.0 - p);
        }
        if cfg.subsample < 1.0 {
            for flag in in_sample.iter_mut() {
                *flag = rng.gen::<f64>() < cfg.subsample;
            }
        }
        let features = pick_features(x.n_cols(), cfg.colsample, &mut rng);
        let mut tree = grow_tree(x, &sorted, &grad, &hess, &in_sample, &features, cfg);
        if tree.num_splits() == 0 {
            // nothing left to split on
            break;
        }

        let prev = *train_nll.last().expect("seeded with base loss");
        let mut outputs: Vec<f64> = (0..n).map(|i| tree.predict(x.row(i))).collect();
        let mut next: Vec<f64> = margins.iter().zip(&outputs).map(|(m, o)| m + o).collect();
        let mut nll = logistic_nll(&next, y);
        let mut shrinks = 0;
        while nll > prev && shrinks < MAX_SHRINK_STEPS {
            tree.scale_leaves(0.5);
            outputs = (0..n).map(|i| tree.predict(x.row(i))).collect();
            next = margins.iter().zip(&outputs).map(|(m, o)| m + o).collect();
            nll = logistic_nll(&next, y);
            shrinks += 1;
        }
        if nll > prev {
            break;
        }
        if shrinks > 0 {
            shrunk_rounds += 1;
        }
        assert!(nll <= prev, "training loss rose from {prev} to {nll}");
        margins = next;
        train_nll.push(nll);

        if let (Some(vm), Some((vx, vy))) = (valid_margins.as_mut(), valid) {
            for (i, m) in vm.iter_mut().enumerate() {
                *m += tree.predict(vx.row(i));
            }
            let v = logistic_nll(vm, vy);
            valid_nll.push(v);
            let round = model.trees.len() + 1;
            if v < best_valid.0 {
                best_valid = (v, round);
            }
            model.trees.push(tree);
            if let Some(patience) = cfg.early_stopping_rounds {
                if round - best_valid.1 >= patience {
                    break;
                }
            }
        } else {
            model.trees.push(tree);
        }
    }

    if valid.is_some() && cfg.early_stopping_rounds.is_some() && best_valid.1 < model.trees.len() {
        model.trees.truncate(best_valid.1);
        train_nll.truncate(best_valid.1 + 1);
        margins = (0..n).map(|i| model.margin(x.row(i))).collect();
    }

    Ok(GbmFit {
        model,
        train_nll,
        train_margins: margins,
        valid_nll,
        shrunk_rounds,
    })
}

fn presort(x: &FeatureMatrix) -> Vec<Vec<u32>> {
    (0..x.n_cols())
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.n_rows() as u32).collect();
            idx.sort_by(|&a, &b| x.get(a as usize, f).total_cmp(&x.get(b as usize, f)));
            idx
        })
        .collect()
}

fn pick_features(n_cols: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n_cols).collect();
    }
    let count = ((n_cols as f64 * fraction).ceil() as usize).clamp(1, n_cols);
    let mut picked = sample(rng, n_cols, count).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Copy)]
struct SplitChoice {
    gain: f64,
    feature: usize,
    threshold: f64,
    gl: f64,
    hl: f64,
}

#[derive(Clone, Copy)]
struct Frontier {
    node: usize,
    g: f64,
    h: f64,
}

#[derive(Clone, Copy, Default)]
struct ScanState {
    gl: f64,
    hl: f64,
    last: Option<f64>,
}

/// Level-wise exact greedy growth. Each level scans every presorted column
/// once, accumulating left sums per frontier node.
fn grow_tree(
    x: &FeatureMatrix,
    sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    in_sample: &[bool],
    features: &[usize],
    cfg: &GbmConfig,
) -> DecisionTree {
    let n = x.n_rows();
    let mut node_of: Vec<u32> = in_sample.iter().map(|&s| if s { 0 } else { NO_NODE }).collect();
    let (mut g0, mut h0) = (0.0, 0.0);
    for i in (0..n).filter(|&i| in_sample[i]) {
        g0 += grad[i];
        h0 += hess[i];
    }
    let mut nodes = vec![Node::Leaf { leaf_value: 0.0 }];
    let mut frontier = vec![Frontier {
        node: 0,
        g: g0,
        h: h0,
    }];
    let leaf = |g: f64, h: f64| -cfg.learning_rate * g / (h + cfg.lambda);

    for _depth in 0..cfg.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot_of = vec![usize::MAX; nodes.len()];
        for (s, f) in frontier.iter().enumerate() {
            slot_of[f.node] = s;
        }
        let best = find_splits(x, sorted, grad, hess, &node_of, &slot_of, &frontier, features, cfg);

        let mut next = Vec::new();
        let mut children = vec![None; nodes.len()];
        for (slot, fr) in frontier.iter().enumerate() {
            match best[slot] {
                Some(choice) => {
                    let left = nodes.len();
                    let right = left + 1;
                    nodes.push(Node::Leaf { leaf_value: 0.0 });
                    nodes.push(Node::Leaf { leaf_value: 0.0 });
                    nodes[fr.node] = Node::Split {
                        feature_index: choice.feature,
                        threshold: choice.threshold,
                        left,
                        right,
                    };
                    children[fr.node] = Some((choice.feature, choice.threshold, left, right));
                    next.push(Frontier {
                        node: left,
                        g: choice.gl,
                        h: choice.hl,
                    });
                    next.push(Frontier {
                        node: right,
                        g: fr.g - choice.gl,
                        h: fr.h - choice.hl,
                    });
                }
                None => {
                    nodes[fr.node] = Node::Leaf {
                        leaf_value: leaf(fr.g, fr.h),
                    };
                }
            }
        }
        for (r, node) in node_of.iter_mut().enumerate() {
            if *node == NO_NODE {
                continue;
            }
            if let Some(Some((f, t, left, right))) = children.get(*node as usize) {
                *node = if x.get(r, *f) <= *t { *left } else { *right } as u32;
            }
        }
        frontier = next;
    }
    for fr in &frontier {
        nodes[fr.node] = Node::Leaf {
            leaf_value: leaf(fr.g, fr.h),
        };
    }
    DecisionTree { nodes }
}

/// Best admissible split per frontier node, scanning each presorted column
/// once. Features ascend and thresholds ascend within a feature, so a strict
/// `>` keeps the lowest (feature, threshold) among equal gains.
#[allow(clippy::too_many_arguments)]
fn find_splits(
    x: &FeatureMatrix,
    sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    node_of: &[u32],
    slot_of: &[usize],
    frontier: &[Frontier],
    features: &[usize],
    cfg: &GbmConfig,
) -> Vec<Option<SplitChoice>> {
    let mut best: Vec<Option<SplitChoice>> = vec![None; frontier.len()];
    let mut states = vec![ScanState::default(); frontier.len()];
    for &f in features {
        states.fill(ScanState::default());
        for &r in &sorted[f] {
            let r = r as usize;
            let node = node_of[r];
            if node == NO_NODE {
                continue;
            }
            let slot = slot_of[node as usize];
            if slot == usize::MAX {
                continue;
            }
            let v = x.get(r, f);
            let st = &mut states[slot];
            if let Some(last) = st.last {
                if v > last {
                    let Frontier { g, h, .. } = frontier[slot];
                    let (gr, hr) = (g - st.gl, h - st.hl);
                    if st.hl >= cfg.min_child_weight && hr >= cfg.min_child_weight {
                        let gain = split_gain(st.gl, st.hl, gr, hr, cfg.lambda, cfg.gamma);
                        if gain >= 0.0 && best[slot].is_none_or(|b| gain > b.gain) {
                            let mut threshold = last + (v - last) / 2.0;
                            if threshold >= v {
                                threshold = last;
                            }
                            best[slot] = Some(SplitChoice {
                                gain,
                                feature: f,
                                threshold,
                                gl: st.gl,
                                hl: st.hl,
                            });
                        }
                    }
                }
            }
            st.gl += grad[r];
            st.hl += hess[r];
            st.last = Some(v);
        }
    }
    best
}

/// A candidate split and its gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootSplit {
    pub feature_index: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Best split of the first tree's root for labels `y`, i.e. with gradients
/// taken at the base-rate margin. `None` when every split has negative gain.
pub fn best_root_split(x: &FeatureMatrix, y: &[bool], cfg: &GbmConfig) -> Result<Option<RootSplit>> {
    let n = x.n_rows();
    if y.len() != n || n == 0 {
        return Err(Error::invalid("labels must match a non-empty matrix"));
    }
    let mean = y.iter().filter(|&&v| v).count() as f64 / n as f64;
    let p = sigmoid(math::logit(mean));
    let grad: Vec<f64> = y.iter().map(|&v| p - f64::from(u8::from(v))).collect();
    let hess = vec![p * (1.0 - p); n];
    let frontier = [Frontier {
        node: 0,
        g: grad.iter().sum(),
        h: hess.iter().sum(),
    }];
    let features: Vec<usize> = (0..x.n_cols()).collect();
    let best = find_splits(x, &presort(x), &grad, &hess, &vec![0; n], &[0], &frontier, &features, cfg);
    Ok(best[0].map(|c| RootSplit {
        feature_index: c.feature,
        threshold: c.threshold,
        gain: c.gain,
    }))
}

fn check_names(model: &GbmEnsemble, names: &[String]) -> Result<()> {
    if model.feature_names.as_slice() != names {
        let detail = model
            .feature_names
            .iter()
            .zip(names)
            .position(|(a, b)| a != b)
            .map(|i| format!("first difference at column {i}: model `{}` vs data `{}`", model.feature_names[i], names[i]))
            .unwrap_or_else(|| {
                format!("model has {} features, data has {}", model.feature_names.len(), names.len())
            });
        return Err(Error::Incompatible(format!("feature names differ ({detail})")));
    }
    Ok(())
}

pub fn predict_gbm(model: &GbmEnsemble, x: &FeatureVector) -> Result<f64> {
    check_names(model, x.names())?;
    Ok(clamp_prob(sigmoid(model.margin(x.values()))))
}

pub fn predict_batch(model: &GbmEnsemble, x: &FeatureMatrix) -> Result<Vec<f64>> {
    check_names(model, x.names())?;
    Ok(x.rows()
        .map(|row| clamp_prob(sigmoid(model.margin(row))))
        .collect())
}

/// Split counts per feature, most used first (ties by column order).
/// Features never split on are omitted.
pub fn feature_importance(model: &GbmEnsemble) -> Vec<(String, usize)> {
    let mut counts = vec![0usize; model.feature_names.len()];
    for tree in &model.trees {
        for node in &tree.nodes {
            if let Node::Split { feature_index, .. } = node {
                counts[*feature_index] += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .map(|(i, c)| (model.feature_names[i].clone(), c))
        .collect()
}

/// `feature,score` rows in importance order.
pub fn write_importance_csv<W: std::io::Write>(mut out: W, importance: &[(String, usize)]) -> Result<()> {
    writeln!(out, "feature,score")?;
    for (name, count) in importance {
        writeln!(out, "{name},{count}")?;
    }
    out.flush()?;
    Ok(())
}
