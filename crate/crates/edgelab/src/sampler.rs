//! Token sampling with top-k / top-p filtering and temperature.
//!
//! Filtering order is fixed: top-k first, then top-p over the survivors,
//! then a temperature-scaled renormalization of whatever survived. The
//! log-prob streams recorded for training always come from the *full*
//! unfiltered distribution; filtering only shapes which token gets drawn.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::vocab::TokenId;

/// Sampling configuration. `guided_fraction` is carried here because the
/// rollout engine draws the per-rollout guided flag as part of sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// `None` disables top-k.
    pub top_k: Option<usize>,
    /// Maximum response tokens per rollout.
    pub max_tokens: usize,
    /// Take the argmax instead of sampling.
    pub greedy: bool,
    /// Probability that a rollout is generated by the guided behavior
    /// policy instead of the plain student.
    pub guided_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_p: 0.95,
            top_k: Some(20),
            max_tokens: 16,
            greedy: false,
            guided_fraction: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return domain_err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return domain_err(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.top_k == Some(0) {
            return domain_err("top_k must be at least 1 when set");
        }
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return domain_err(format!(
                "guided_fraction must lie in [0, 1], got {}",
                self.guided_fraction
            ));
        }
        Ok(())
    }
}

/// Draw one token from a full next-token log-distribution.
///
/// Ties during filtering break toward the lower token id, so the draw is
/// a pure function of `(log_dist, cfg, rng state)`.
pub fn sample_token(log_dist: &[f64], cfg: &SamplerConfig, rng: &mut ChaCha12Rng) -> Result<TokenId> {
    cfg.validate()?;
    if log_dist.is_empty() {
        return Err(Error::Sampler("empty distribution".into()));
    }
    if log_dist.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Sampler("distribution contains NaN or +inf".into()));
    }

    if cfg.greedy {
        let mut best = 0usize;
        for i in 1..log_dist.len() {
            if log_dist[i] > log_dist[best] {
                best = i;
            }
        }
        if log_dist[best] == f64::NEG_INFINITY {
            return Err(Error::Sampler("all tokens have zero probability".into()));
        }
        return Ok(best as TokenId);
    }

    // Rank by probability, ties toward lower id.
    let mut order: Vec<usize> = (0..log_dist.len()).collect();
    order.sort_by(|&a, &b| {
        log_dist[b].partial_cmp(&log_dist[a]).expect("no NaN after validation").then(a.cmp(&b))
    });

    // Top-k.
    let keep = cfg.top_k.map_or(order.len(), |k| k.min(order.len()));
    let mut survivors = &order[..keep];

    // Top-p over the survivors: keep the smallest prefix (in rank order)
    // whose renormalized mass reaches top_p.
    let probs: Vec<f64> = survivors.iter().map(|&i| log_dist[i].exp()).collect();
    let total: f64 = probs.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Sampler("no probability mass survives top-k".into()));
    }
    let mut cut = survivors.len();
    let mut acc = 0.0;
    for (rank, &p) in probs.iter().enumerate() {
        acc += p / total;
        if acc >= cfg.top_p - 1e-12 {
            cut = rank + 1;
            break;
        }
    }
    survivors = &survivors[..cut];

    // Temperature-scaled renormalization of the survivors.
    let max_lp = survivors.iter().map(|&i| log_dist[i]).fold(f64::NEG_INFINITY, f64::max);
    if max_lp == f64::NEG_INFINITY {
        return Err(Error::Sampler("all surviving tokens have zero probability".into()));
    }
    let weights: Vec<f64> =
        survivors.iter().map(|&i| ((log_dist[i] - max_lp) / cfg.temperature).exp()).collect();
    let z: f64 = weights.iter().sum();
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::Sampler("temperature renormalization produced zero mass".into()));
    }

    let u: f64 = rng.gen::<f64>() * z;
    let mut acc = 0.0;
    for (rank, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(survivors[rank] as TokenId);
        }
    }
    // Floating-point slack: fall back to the last survivor.
    Ok(*survivors.last().expect("non-empty survivors") as TokenId)
}
