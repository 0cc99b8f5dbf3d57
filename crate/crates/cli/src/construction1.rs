//! The four-token example where down-weighting the draft's top tokens keeps
//! the acceptance rate but doubles the cache hit rate after a rejection.
//!
//! Everything is recomputed here in exact rationals; the f64 routines in
//! `ssd-core` are then checked against the exact values.

use anyhow::Result;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;

use ssd_core::cache::rejection_hit_rate;
use ssd_core::dist::{
    acceptance_rate, apply_scheme, residual, Categorical, Logits, SamplingScheme,
};
use ssd_core::perf::{speedup_ssd, TimingParams, TokenYields};

use crate::{to_json, CommandOutput};

const TARGET: [i64; 4] = [48, 48, 2, 2];
const DRAFT: [i64; 4] = [49, 49, 1, 1];
const FANOUT: usize = 2;
/// Matched verification cost ratio used for the speedup comparison.
const T_RATIO: (i64, i64) = (1, 2);
const F64_TOL: f64 = 1e-12;

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn percent(v: &[i64]) -> Vec<BigRational> {
    v.iter().map(|&x| q(x, 100)).collect()
}

fn normalize(w: &[BigRational]) -> Vec<BigRational> {
    let total: BigRational = w.iter().sum();
    w.iter().map(|x| x / &total).collect()
}

fn accept(pt: &[BigRational], pd: &[BigRational]) -> BigRational {
    pt.iter().zip(pd).map(|(a, b)| a.min(b).clone()).sum()
}

fn residual_exact(pt: &[BigRational], pd: &[BigRational]) -> Vec<BigRational> {
    let pos: Vec<BigRational> = pt
        .iter()
        .zip(pd)
        .map(|(a, b)| if a > b { a - b } else { BigRational::zero() })
        .collect();
    normalize(&pos)
}

/// Top `f` indices of `w`, ties to the lower index, skipping `exclude`.
fn top(w: &[BigRational], f: usize, exclude: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).filter(|&i| i != exclude).collect();
    idx.sort_by(|&a, &b| w[b].cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(f);
    idx
}

/// P(bonus in cache | rejection). The cache holds the top tokens of the raw
/// draft other than the rejected one.
fn hit_given_reject(pt: &[BigRational], pd: &[BigRational], raw: &[BigRational]) -> BigRational {
    let r = residual_exact(pt, pd);
    let mut reject = BigRational::zero();
    let mut hit = BigRational::zero();
    for x in 0..pt.len() {
        if pd[x] <= pt[x] {
            continue;
        }
        let mass = &pd[x] - &pt[x];
        let cached: BigRational = top(raw, FANOUT, x).into_iter().map(|b| r[b].clone()).sum();
        hit += &mass * cached;
        reject += mass;
    }
    hit / reject
}

fn strs(v: &[BigRational]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn f64s(v: &[BigRational]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeReport {
    pub draft: Vec<String>,
    pub acceptance_rate: String,
    pub residual: Vec<String>,
    pub hit_rate_given_reject: String,
    /// Single-token lookahead, both roles yielding `1 + alpha`.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Construction1Report {
    pub target: Vec<String>,
    pub downweight: String,
    pub standard: SchemeReport,
    pub saguaro: SchemeReport,
    /// Largest gap between the exact values and the f64 library routines.
    pub f64_max_error: f64,
    pub pass: bool,
}

pub fn construction1() -> Result<Construction1Report> {
    let pt = percent(&TARGET);
    let pd = percent(&DRAFT);
    // C chosen so the down-weighted draft is (0.47, 0.47, 0.03, 0.03).
    let c = q(47, 147);
    let topset = top(&pd, FANOUT, usize::MAX);
    let weighted: Vec<BigRational> = pd
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if topset.contains(&i) {
                w * &c
            } else {
                w.clone()
            }
        })
        .collect();
    let pd2 = normalize(&weighted);

    let t = q(T_RATIO.0, T_RATIO.1).to_f64().unwrap_or(f64::NAN);
    let timing = TimingParams::new(t, t)?;
    let report = |draft: &[BigRational]| {
        let alpha = accept(&pt, draft);
        let hit = hit_given_reject(&pt, draft, &pd);
        let e = 1.0 + alpha.to_f64().unwrap_or(f64::NAN);
        let y = TokenYields {
            e_hit: e,
            e_miss: e,
            e_sd: e,
            t_sd: t,
        };
        SchemeReport {
            draft: strs(draft),
            acceptance_rate: alpha.to_string(),
            residual: strs(&residual_exact(&pt, draft)),
            hit_rate_given_reject: hit.to_string(),
            speedup: speedup_ssd(hit.to_f64().unwrap_or(f64::NAN), &y, &timing),
        }
    };
    let standard = report(&pd);
    let saguaro = report(&pd2);

    // The library's f64 versions of the same quantities.
    let ptc = Categorical::new(f64s(&pt))?;
    let pdc = Categorical::new(f64s(&pd))?;
    let z = Logits::from_probs(pdc.probs())?;
    let sag = SamplingScheme::Saguaro {
        fanout: FANOUT,
        downweight: c.to_f64().unwrap_or(f64::NAN),
        temperature: 1.0,
    };
    let pd2c = apply_scheme(&z, &sag)?;
    let mut err: f64 = 0.0;
    let mut track = |a: f64, b: f64| err = err.max((a - b).abs());
    for (a, b) in pd2c.probs().iter().zip(f64s(&pd2)) {
        track(*a, b);
    }
    for (draft_c, draft_q) in [(&pdc, &pd), (&pd2c, &pd2)] {
        track(
            acceptance_rate(&ptc, draft_c)?,
            accept(&pt, draft_q).to_f64().unwrap_or(f64::NAN),
        );
        for (a, b) in residual(&ptc, draft_c)?
            .probs()
            .iter()
            .zip(f64s(&residual_exact(&pt, draft_q)))
        {
            track(*a, b);
        }
    }
    let std_scheme = SamplingScheme::Standard { temperature: 1.0 };
    for (scheme, draft_q) in [(&std_scheme, &pd), (&sag, &pd2)] {
        let lib = rejection_hit_rate(&ptc, &z, scheme, FANOUT)?.unwrap_or(f64::NAN);
        track(
            lib,
            hit_given_reject(&pt, draft_q, &pd)
                .to_f64()
                .unwrap_or(f64::NAN),
        );
    }

    let pass = pd2 == percent(&[47, 47, 3, 3])
        && accept(&pt, &pd) == q(98, 100)
        && accept(&pt, &pd2) == q(98, 100)
        && residual_exact(&pt, &pd) == [q(0, 1), q(0, 1), q(1, 2), q(1, 2)]
        && residual_exact(&pt, &pd2) == [q(1, 2), q(1, 2), q(0, 1), q(0, 1)]
        && hit_given_reject(&pt, &pd, &pd) == q(1, 2)
        && hit_given_reject(&pt, &pd2, &pd) == q(1, 1)
        && saguaro.speedup > standard.speedup
        && err < F64_TOL;
    Ok(Construction1Report {
        target: strs(&pt),
        downweight: c.to_string(),
        standard,
        saguaro,
        f64_max_error: err,
        pass,
    })
}

pub fn cmd_construction1() -> Result<CommandOutput> {
    let report = construction1()?;
    let mut out = CommandOutput::new(to_json(&report)?);
    out.pass = report.pass;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_is_exact() {
        let r = construction1().unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.saguaro.draft, ["47/100", "47/100", "3/100", "3/100"]);
        assert_eq!(r.standard.hit_rate_given_reject, "1/2");
        assert_eq!(r.saguaro.hit_rate_given_reject, "1");
        assert_eq!(r.standard.acceptance_rate, "49/50");
    }
}
