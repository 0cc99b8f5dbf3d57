//! Analytic speedup calculus. Times are in units of one verification pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no crossover: log argument {0} is outside (0, 1]")]
    NoCrossover(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingParams {
    /// Primary speculator time.
    pub t_p: f64,
    /// Backup speculator time.
    pub t_b: f64,
}

impl TimingParams {
    pub fn new(t_p: f64, t_b: f64) -> Result<Self, PerfError> {
        let t = Self { t_p, t_b };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        for (name, v) in [("t_p", self.t_p), ("t_b", self.t_b)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PerfError::InvalidParams(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Round latency when the cache hits.
    pub fn hit_latency(&self) -> f64 {
        self.t_p.max(1.0)
    }

    /// Round latency when it misses: verify, then run the backup.
    pub fn miss_latency(&self) -> f64 {
        1.0 + self.t_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenYields {
    pub e_hit: f64,
    pub e_miss: f64,
    pub e_sd: f64,
    pub t_sd: f64,
}

impl TokenYields {
    pub fn validate(&self) -> Result<(), PerfError> {
        if !(self.e_hit >= self.e_miss && self.e_miss >= 1.0) {
            return Err(PerfError::InvalidParams(format!(
                "need e_hit >= e_miss >= 1, got {} and {}",
                self.e_hit, self.e_miss
            )));
        }
        if !(self.e_sd >= 1.0 && self.t_sd >= 0.0) {
            return Err(PerfError::InvalidParams(format!(
                "need e_sd >= 1 and t_sd >= 0, got {} and {}",
                self.e_sd, self.t_sd
            )));
        }
        Ok(())
    }

    fn numerator(&self, p_hit: f64) -> f64 {
        p_hit * self.e_hit + (1.0 - p_hit) * self.e_miss
    }
}

/// Expected tokens per unit time relative to autoregressive decoding.
pub fn speedup_ssd(p_hit: f64, y: &TokenYields, t: &TimingParams) -> f64 {
    speedup_batch(p_hit, y, t, 1)
}

pub fn speedup_sd(e_sd: f64, t_sd: f64) -> f64 {
    e_sd / (1.0 + t_sd)
}

/// Bounds on `speedup_ssd / speedup_sd`, valid when `T_p < 1` and `T_b = 0`.
pub fn sandwich_bounds(y: &TokenYields, p_hit: f64) -> (f64, f64) {
    let upper = (1.0 + y.t_sd) * y.e_hit / y.e_sd;
    (upper * p_hit, upper)
}

/// The whole batch waits for the backup if any sequence misses.
pub fn speedup_batch(p_hit: f64, y: &TokenYields, t: &TimingParams, b: u64) -> f64 {
    let all_hit = p_hit.powf(b as f64);
    y.numerator(p_hit) / (all_hit * t.hit_latency() + (1.0 - all_hit) * t.miss_latency())
}

/// The primary speculator redrafts on a miss, so every round yields `E_hit`.
pub fn speedup_slow_backup(p_hit: f64, e_hit: f64, t_p: f64, b: f64) -> f64 {
    let all_hit = p_hit.powf(b);
    e_hit / (all_hit * t_p.max(1.0) + (1.0 - all_hit) * (1.0 + t_p))
}

/// A free backup (`T_b = 0`) with `T_p <= 1` makes every round cost 1.
pub fn speedup_fast_backup(p_hit: f64, y: &TokenYields) -> f64 {
    y.numerator(p_hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalBatch {
    pub b_star: f64,
    /// First integer batch size at which the fast backup is preferred.
    pub switch_at: u64,
}

/// Batch size where the fast backup catches up with the slow one.
pub fn critical_batch(
    p_hit: f64,
    y: &TokenYields,
    t: &TimingParams,
) -> Result<CriticalBatch, PerfError> {
    if !(t.t_p > 0.0 && t.t_p <= 1.0) {
        return Err(PerfError::InvalidParams(format!(
            "t_p = {} must lie in (0, 1]",
            t.t_p
        )));
    }
    if !(p_hit > 0.0 && p_hit < 1.0) {
        return Err(PerfError::InvalidParams(format!(
            "p_hit = {p_hit} must lie in (0, 1)"
        )));
    }
    let arg = 1.0 + 1.0 / t.t_p - y.e_hit / (t.t_p * y.numerator(p_hit));
    if !(arg > 0.0 && arg <= 1.0) {
        return Err(PerfError::NoCrossover(arg));
    }
    let b_star = arg.ln() / p_hit.ln();
    Ok(CriticalBatch {
        b_star,
        switch_at: b_star.ceil().max(1.0) as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub draft_tokens_per_round: u64,
    pub flop_multiplier_vs_sd: f64,
    pub cache_bits: u64,
}

/// Bits per stored number in the cache estimate.
pub const CACHE_WORD_BITS: u64 = 16;

/// Draft-side cost of keeping a cache of `F` outcomes per position for a
/// batch of `batch` sequences; each entry carries K tokens and K+1 logit rows.
pub fn overhead_estimate(batch: u64, k: u64, fanout: u64, vocab: u64, c_hat: f64) -> Overhead {
    overhead_estimate_with_width(batch, k, fanout, vocab, c_hat, CACHE_WORD_BITS)
}

pub fn overhead_estimate_with_width(
    batch: u64,
    k: u64,
    fanout: u64,
    vocab: u64,
    c_hat: f64,
    word_bits: u64,
) -> Overhead {
    Overhead {
        draft_tokens_per_round: batch * k * (k + 1) * fanout,
        flop_multiplier_vs_sd: c_hat * ((k + 1) * fanout) as f64,
        cache_bits: batch * fanout * k * (k + 1) * (vocab + 1) * word_bits,
    }
}
