use anyhow::Result;
use serde::Serialize;

use ssd_core::sim::{derive_seed, run_ar, run_ssd_batch};
use ssd_core::specdec::{exact_round_distribution_with_rule, losslessness_gap};
use ssd_core::stats::transition_homogeneity;

use crate::config::{Prepared, VerifyMode};
use crate::{to_json, CommandOutput};

/// Exact mode passes below this total-variation gap.
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LosslessReport {
    pub mode: VerifyMode,
    pub tv_distance: f64,
    pub chi2_pvalue: Option<f64>,
    pub pass: bool,
}

pub fn verify_lossless(p: &Prepared) -> Result<LosslessReport> {
    match p.config.verify.mode {
        VerifyMode::Exact => exact(p),
        VerifyMode::MonteCarlo => monte_carlo(p),
    }
}

/// Worst gap over every context row between one round's emitted law and the
/// target chain.
fn exact(p: &Prepared) -> Result<LosslessReport> {
    let (target, draft) = (&p.pair.target, &p.pair.draft);
    let v = target.vocab();
    let mut worst: f64 = 0.0;
    for ctx in 0..target.num_contexts() {
        // Base-V digits of the row index, most significant first.
        let mut context = vec![0; target.order()];
        let mut rest = ctx;
        for slot in context.iter_mut().rev() {
            *slot = rest % v;
            rest /= v;
        }
        let law = exact_round_distribution_with_rule(
            target,
            draft,
            &context,
            p.sim.k,
            &p.sim.scheme,
            p.sim.verify_rule,
        )?;
        worst = worst.max(losslessness_gap(target, &context, &law, p.sim.k));
    }
    Ok(LosslessReport {
        mode: VerifyMode::Exact,
        tv_distance: worst,
        chi2_pvalue: None,
        pass: worst < EXACT_TOL,
    })
}

/// Two-sample test of an SSD stream against an autoregressive stream of
/// the same length.
fn monte_carlo(p: &Prepared) -> Result<LosslessReport> {
    let n = p.config.verify.tokens as usize;
    let mut cfg = p.replica(0);
    cfg.batch_size = 1;
    cfg.record = true;
    cfg.rounds = (n as u64).div_ceil(2).max(1);
    let mut ssd = run_ssd_batch(&cfg)?;
    while ssd.streams[0].len() < n {
        cfg.rounds *= 2;
        ssd = run_ssd_batch(&cfg)?;
    }
    let ctx = &cfg.initial_context;
    let ar = run_ar(
        &p.pair.target,
        ctx,
        n as u64,
        derive_seed(p.config.seed, u64::MAX),
    );
    let t = &p.pair.target;
    let test = transition_homogeneity(
        t.vocab(),
        t.order(),
        ctx,
        &ssd.streams[0][..n],
        &ar.streams[0],
    );
    Ok(LosslessReport {
        mode: VerifyMode::MonteCarlo,
        tv_distance: test.tv,
        chi2_pvalue: Some(test.p_value),
        pass: test.p_value > p.config.verify.significance,
    })
}

pub fn cmd_verify_lossless(p: &Prepared) -> Result<CommandOutput> {
    let report = verify_lossless(p)?;
    let mut out = CommandOutput::new(to_json(&report)?);
    out.pass = report.pass;
    Ok(out)
}
