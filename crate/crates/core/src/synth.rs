//! Seeded synthetic ranker outputs.
//!
//! [`gen_miscalibrated`] draws a latent logit vector per query, samples the
//! true answer from its softmax and reports the top-k of a sharpened softmax,
//! so temperature scaling by the sharpening factor recovers calibration
//! exactly.
//!
//! [`gen_flow_signal`] couples the shape of each candidate's attention flow
//! to its correctness. A flow is `softmax(beta * g)` over layers with
//! Gaussian `g`, either peaked (large `beta`) or flat. With probability
//! equal to the signal strength a candidate is peaked exactly when it is
//! correct; otherwise its shape is drawn independently of correctness. The
//! overall flow level is drawn independently too, so the mean flow carries
//! no signal.
//!
//! Each record uses its own ChaCha stream keyed by the record index, so
//! generation is parallel and still a pure function of the seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AttentionRecord, CandidateAnswer, RankedQueryRecord};
use crate::error::{Error, Result};
use crate::math::softmax;

/// Chance of a peaked flow when the shape is not tied to correctness.
const BACKGROUND_PEAKED: f64 = 0.3;
const PEAKED_SHARPNESS: f64 = 2.75;
const FLAT_SHARPNESS: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiscalibratedConfig {
    pub n: usize,
    pub k: usize,
    /// Sharpening factor T0 applied to the latent logits.
    pub sharpen: f64,
    pub seed: u64,
    /// Standard deviation of the latent logits.
    pub latent_scale: f64,
    pub num_layers: usize,
    pub num_heads: usize,
}

impl Default for MiscalibratedConfig {
    fn default() -> Self {
        MiscalibratedConfig {
            n: 1000,
            k: crate::DEFAULT_TOP_K,
            sharpen: 1.0,
            seed: 0,
            latent_scale: 1.4,
            num_layers: 4,
            num_heads: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSignalConfig {
    pub n: usize,
    pub k: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Probability that a candidate's flow shape follows its correctness.
    pub signal_strength: f64,
    pub seed: u64,
    /// Number of latent answer classes, at least `k + 1`.
    pub num_classes: usize,
    pub latent_scale: f64,
    /// Standard deviation of the noise between the latent logits and the
    /// reported scores.
    pub score_noise: f64,
}

impl Default for FlowSignalConfig {
    fn default() -> Self {
        FlowSignalConfig {
            n: 1000,
            k: crate::DEFAULT_TOP_K,
            num_layers: 12,
            num_heads: 4,
            signal_strength: 0.7,
            seed: 0,
            num_classes: 8,
            latent_scale: 1.4,
            score_noise: 1.0,
        }
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_shape(n: usize, k: usize, layers: usize, heads: usize) -> Result<()> {
    if n == 0 || k == 0 || layers == 0 || heads == 0 {
        return Err(Error::invalid("n, k, layers and heads must all be positive"));
    }
    Ok(())
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let draw: f64 = StandardNormal.sample(rng);
            scale * draw
        })
        .collect()
}

/// Indices of the `k` largest values, largest first; ties keep index order.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order
}

fn sharpness(peaked: bool) -> f64 {
    if peaked {
        PEAKED_SHARPNESS
    } else {
        FLAT_SHARPNESS
    }
}

/// Per-layer, per-head attention for one candidate. The per-layer head mean
/// equals `level * softmax(sharpness * g)`.
fn synth_flow(rng: &mut ChaCha8Rng, layers: usize, heads: usize, sharpness: f64, sep: usize) -> AttentionRecord {
    let g = normal_vec(rng, layers, sharpness);
    let shape = softmax(&g);
    let level: f64 = rng.gen_range(0.2..0.6);
    let eps: Vec<f64> = (0..heads).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let eps_mean = eps.iter().sum::<f64>() / heads as f64;
    let cls_to_sep = shape
        .iter()
        .map(|w| {
            eps.iter()
                .map(|e| (level * w * (1.0 + e - eps_mean)).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    AttentionRecord {
        num_layers: layers,
        num_heads: heads,
        cls_to_sep,
        sep_index_used: sep,
        cls_row: None,
    }
}

struct Ranked {
    scores: Vec<f64>,
    correct: Vec<bool>,
}

/// Samples the true class from `softmax(latent)` and reports the top-k of
/// `reported`.
fn rank_candidates(rng: &mut ChaCha8Rng, latent: &[f64], reported: &[f64], k: usize) -> Ranked {
    let truth = WeightedIndex::new(softmax(latent))
        .expect("softmax weights are positive")
        .sample(rng);
    let order = top_indices(reported, k);
    Ranked {
        scores: order.iter().map(|&c| reported[c]).collect(),
        correct: order.iter().map(|&c| c == truth).collect(),
    }
}

fn assemble(
    rng: &mut ChaCha8Rng,
    index: usize,
    ranked: Ranked,
    mut flow: impl FnMut(&mut ChaCha8Rng, bool, usize) -> AttentionRecord,
) -> RankedQueryRecord {
    let query_len: u32 = rng.gen_range(5..=30);
    let sep = query_len as usize + 1;
    let candidates = ranked
        .scores
        .iter()
        .zip(&ranked.correct)
        .map(|(&s, &c)| CandidateAnswer {
            softmax_score: s,
            answer_token_length: rng.gen_range(1..=40),
            is_correct: Some(c),
            attention: flow(rng, c, sep),
        })
        .collect();
    RankedQueryRecord {
        query_id: format!("q{index:06}"),
        query_token_length: query_len,
        candidates,
        label: ranked.correct.iter().any(|&c| c),
    }
}

/// Overconfident top-k outputs: reported scores are the top-k of
/// `softmax(sharpen * z)` while the truth follows `softmax(z)`.
pub fn gen_miscalibrated(cfg: &MiscalibratedConfig) -> Result<Vec<RankedQueryRecord>> {
    check_shape(cfg.n, cfg.k, cfg.num_layers, cfg.num_heads)?;
    if !(cfg.sharpen.is_finite() && cfg.sharpen > 0.0) {
        return Err(Error::invalid("sharpening factor must be positive"));
    }
    if !(cfg.latent_scale.is_finite() && cfg.latent_scale > 0.0) {
        return Err(Error::invalid("latent scale must be positive"));
    }
    Ok((0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(cfg.seed, i);
            let z = normal_vec(&mut rng, cfg.k + 1, cfg.latent_scale);
            let sharpened: Vec<f64> = z.iter().map(|v| v * cfg.sharpen).collect();
            let ranked = rank_candidates(&mut rng, &z, &softmax(&sharpened), cfg.k);
            assemble(&mut rng, i, ranked, |rng, _, sep| {
                let peaked = rng.gen_bool(BACKGROUND_PEAKED);
                synth_flow(rng, cfg.num_layers, cfg.num_heads, sharpness(peaked), sep)
            })
        })
        .collect())
}

/// Records whose flow entropy carries label signal in proportion to
/// `signal_strength`, with noisy softmax scores.
pub fn gen_flow_signal(cfg: &FlowSignalConfig) -> Result<Vec<RankedQueryRecord>> {
    check_shape(cfg.n, cfg.k, cfg.num_layers, cfg.num_heads)?;
    if !(0.0..=1.0).contains(&cfg.signal_strength) {
        return Err(Error::invalid("signal strength must lie in [0, 1]"));
    }
    if cfg.num_classes <= cfg.k {
        return Err(Error::invalid("need more latent classes than reported candidates"));
    }
    if !(cfg.latent_scale > 0.0 && cfg.score_noise >= 0.0) {
        return Err(Error::invalid("latent scale must be positive and score noise non-negative"));
    }
    Ok((0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(cfg.seed, i);
            let z = normal_vec(&mut rng, cfg.num_classes, cfg.latent_scale);
            let noise = normal_vec(&mut rng, cfg.num_classes, cfg.score_noise);
            let noisy: Vec<f64> = z.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let ranked = rank_candidates(&mut rng, &z, &softmax(&noisy), cfg.k);
            assemble(&mut rng, i, ranked, |rng, correct, sep| {
                let peaked = if rng.gen_bool(cfg.signal_strength) {
                    correct
                } else {
                    rng.gen_bool(BACKGROUND_PEAKED)
                };
                synth_flow(rng, cfg.num_layers, cfg.num_heads, sharpness(peaked), sep)
            })
        })
        .collect())
}
