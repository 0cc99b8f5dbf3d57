//! Cache-hit-rate algebra.
//!
//! Hits form a two-state chain on the origin of the speculation being
//! verified: after a primary speculation the next round hits with probability
//! `p_p`, after a backup with `p_b`.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specdec::Origin;

#[derive(Debug, Error)]
pub enum HitError {
    #[error("hit rates {p_p} and {p_b} differ by 1 or more; the chain does not converge")]
    Divergent { p_p: f64, p_b: f64 },
    #[error("hit rate {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("power-law fit needs at least two distinct fan-out values")]
    InsufficientData,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRates {
    pub p_hit_p: f64,
    pub p_hit_b: f64,
}

impl HitRates {
    pub fn new(p_hit_p: f64, p_hit_b: f64) -> Result<Self, HitError> {
        for p in [p_hit_p, p_hit_b] {
            if !(0.0..=1.0).contains(&p) {
                return Err(HitError::OutOfRange(p));
            }
        }
        if (p_hit_p - p_hit_b).abs() >= 1.0 {
            return Err(HitError::Divergent {
                p_p: p_hit_p,
                p_b: p_hit_b,
            });
        }
        Ok(Self { p_hit_p, p_hit_b })
    }

    fn ratio(&self) -> f64 {
        self.p_hit_p - self.p_hit_b
    }
}

/// Stationary hit probability `p_b / (1 + p_b - p_p)`.
pub fn unconditional_phit(h: &HitRates) -> f64 {
    let p = h.p_hit_b / (1.0 + h.p_hit_b - h.p_hit_p);
    let lo = h.p_hit_p.min(h.p_hit_b);
    let hi = h.p_hit_p.max(h.p_hit_b);
    debug_assert!(
        p >= lo - 1e-12 && p <= hi + 1e-12,
        "{p} outside [{lo}, {hi}]"
    );
    p.clamp(lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recurrence {
    /// `p(T) = p(T-1) p_p + (1 - p(T-1)) p_b`, starting from `p(0) = p_p`.
    pub iterated: Vec<f64>,
    /// `p(0) d^T + p_b (1 - d^T) / (1 - d)` with `d = p_p - p_b`.
    pub closed_form: Vec<f64>,
}

/// Hit probability at rounds `0..=steps`, computed both ways.
pub fn phit_recurrence(h: &HitRates, steps: usize) -> Recurrence {
    let d = h.ratio();
    let p0 = h.p_hit_p;
    let mut iterated = Vec::with_capacity(steps + 1);
    let mut closed_form = Vec::with_capacity(steps + 1);
    let mut p = p0;
    let mut dt = 1.0;
    for t in 0..=steps {
        if t > 0 {
            p = p * h.p_hit_p + (1.0 - p) * h.p_hit_b;
            dt *= d;
        }
        iterated.push(p);
        closed_form.push(p0 * dt + h.p_hit_b * (1.0 - dt) / (1.0 - d));
    }
    Recurrence {
        iterated,
        closed_form,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub r: f64,
    /// Fitted `ln(miss)` at `F = 1`.
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `ln(miss)` on `ln(F)`; the slope is `-r`.
pub fn fit_powerlaw(samples: &[(u64, f64)]) -> Result<PowerLawFit, HitError> {
    for &(f, m) in samples {
        if f == 0 {
            return Err(HitError::InvalidSample("fan-out must be at least 1".into()));
        }
        if !(m > 0.0 && m <= 1.0) {
            return Err(HitError::InvalidSample(format!(
                "miss rate {m} at F={f} outside (0, 1]"
            )));
        }
    }
    let first = samples.first().ok_or(HitError::InsufficientData)?.0;
    if samples.iter().all(|&(f, _)| f == first) {
        return Err(HitError::InsufficientData);
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|&(f, _)| (f as f64).ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|&(_, m)| m.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(PowerLawFit {
        r: -slope,
        intercept,
        r_squared,
    })
}

#[derive(Deserialize)]
struct MissRow {
    #[serde(rename = "F")]
    f: u64,
    miss_rate: f64,
}

/// Read `F,miss_rate` rows (with that header).
pub fn read_miss_csv<R: Read>(reader: R) -> Result<Vec<(u64, f64)>, HitError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<MissRow>() {
        let row = row?;
        out.push((row.f, row.miss_rate));
    }
    Ok(out)
}

/// One verified round: the origin of the speculation that was just verified
/// and whether its outcome was found in the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub prev_origin: Origin,
    pub hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalHitRates {
    /// `None` when no round followed a primary speculation.
    pub p_hit_p: Option<f64>,
    pub p_hit_b: Option<f64>,
    pub overall: Option<f64>,
    pub rounds_after_primary: u64,
    pub rounds_after_backup: u64,
}

impl EmpiricalHitRates {
    pub fn as_hit_rates(&self) -> Option<HitRates> {
        HitRates::new(self.p_hit_p?, self.p_hit_b?).ok()
    }
}

pub fn empirical_hit_rates(log: &[RoundRecord]) -> EmpiricalHitRates {
    let mut counts = [[0u64; 2]; 2];
    for rec in log {
        let o = usize::from(rec.prev_origin == Origin::Backup);
        counts[o][usize::from(rec.hit)] += 1;
    }
    let rate = |c: [u64; 2]| {
        let n = c[0] + c[1];
        (n > 0).then(|| c[1] as f64 / n as f64)
    };
    let total = [counts[0][0] + counts[1][0], counts[0][1] + counts[1][1]];
    EmpiricalHitRates {
        p_hit_p: rate(counts[0]),
        p_hit_b: rate(counts[1]),
        overall: rate(total),
        rounds_after_primary: counts[0][0] + counts[0][1],
        rounds_after_backup: counts[1][0] + counts[1][1],
    }
}
