//! Gumbel-TopK routing with an iterative masked-softmax relaxation.
//!
//! The relaxation runs `k` rounds of softmax over logits `z`; after each
//! round the round's argmax is masked to `-inf`. The soft weights are the
//! sum of the round distributions, and the masked set after `k` rounds is
//! exactly the hard top-k of `z`.

use serde::{Deserialize, Serialize};

use super::tensor::softmax_in_place;
use super::NumericError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopkMode {
    /// Deterministic top-k of the raw scores.
    HardEval,
    /// Top-k of Gumbel-perturbed scores forward, relaxed weights backward.
    StraightThroughTrain,
    /// Noise-free relaxation.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelTopkConfig {
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Routing stage, folded into the noise key.
    #[serde(default)]
    pub stage: u64,
    pub mode: TopkMode,
}

impl GumbelTopkConfig {
    pub fn hard(k: usize) -> Self {
        Self { k, temperature: 1.0, seed: 0, stage: 0, mode: TopkMode::HardEval }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based uniform in (0, 1) keyed by `(seed, stage, element)`.
pub fn keyed_uniform(seed: u64, stage: u64, element: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(stage ^ splitmix64(element)));
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard Gumbel sample `-ln(-ln u)`.
pub fn gumbel_noise(seed: u64, stage: u64, element: u64) -> f64 {
    -(-keyed_uniform(seed, stage, element).ln()).ln()
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Result of a Gumbel-TopK call. `backward` applies the transposed Jacobian
/// of `soft_weights` with respect to the input scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelTopk {
    /// Selected indices in descending order of (perturbed) score.
    pub kept: Vec<usize>,
    pub soft_weights: Vec<f64>,
    rounds: Vec<Vec<f64>>,
    temperature: f64,
}

impl GumbelTopk {
    pub fn kept_sorted(&self) -> Vec<usize> {
        let mut k = self.kept.clone();
        k.sort_unstable();
        k
    }

    /// `(∂ soft_weights / ∂ scores)ᵀ · upstream`.
    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; upstream.len()];
        for p in &self.rounds {
            let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
            for i in 0..g.len() {
                g[i] += p[i] * (upstream[i] - dot) / self.temperature;
            }
        }
        g
    }
}

pub fn gumbel_topk(scores: &[f64], cfg: &GumbelTopkConfig) -> Result<GumbelTopk, NumericError> {
    if cfg.k == 0 || cfg.k > scores.len() {
        return Err(NumericError::KTooLarge { k: cfg.k, n: scores.len() });
    }
    if !(cfg.temperature > 0.0) {
        return Err(NumericError::InvalidArgument("temperature must be positive".into()));
    }
    let logits: Vec<f64> = match cfg.mode {
        TopkMode::HardEval | TopkMode::Soft => scores.iter().map(|s| s / cfg.temperature).collect(),
        TopkMode::StraightThroughTrain => scores
            .iter()
            .enumerate()
            .map(|(i, s)| s / cfg.temperature + gumbel_noise(cfg.seed, cfg.stage, i as u64))
            .collect(),
    };
    // Hard selection uses the raw scores in eval mode so that huge logits
    // from tiny temperatures cannot reorder near-ties.
    let kept = match cfg.mode {
        TopkMode::HardEval => topk_indices(scores, cfg.k),
        _ => topk_indices(&logits, cfg.k),
    };

    let mut masked = logits;
    let mut soft = vec![0.0; scores.len()];
    let mut rounds = Vec::with_capacity(cfg.k);
    for &sel in &kept {
        let mut p = masked.clone();
        softmax_in_place(&mut p);
        for (s, v) in soft.iter_mut().zip(&p) {
            *s += v;
        }
        rounds.push(p);
        masked[sel] = f64::NEG_INFINITY;
    }
    Ok(GumbelTopk { kept, soft_weights: soft, rounds, temperature: cfg.temperature })
}
