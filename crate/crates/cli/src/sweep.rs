use anyhow::{bail, Result};
use serde::Serialize;

use ssd_core::cache::{residual_hit_probability, FanOutPlan};
use ssd_core::dist::{acceptance_rate, apply_scheme, SamplingScheme};
use ssd_core::hitmodel::fit_powerlaw;
use ssd_core::perf::{critical_batch, TimingParams, TokenYields};
use ssd_core::sim::{run_ssd_batch, BackupKind, Mode, SimConfig};
use ssd_core::specdec::Origin;

use crate::config::{build_plan, PlanSpec, Prepared};
use crate::simulate::analytic_speedup;
use crate::{par_map, to_csv, CommandOutput};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FanoutRow {
    pub strategy: &'static str,
    /// Constant fan-out for `constant` rows, total budget otherwise.
    pub x: usize,
    pub plan: String,
    pub miss_rate_p: Option<f64>,
    pub miss_rate_b: Option<f64>,
    pub hit_rate: f64,
    pub tokens_per_vtime: f64,
}

fn plan_string(plan: &FanOutPlan) -> String {
    plan.f
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn fanout_row(strategy: &'static str, x: usize, cfg: &SimConfig) -> Result<FanoutRow> {
    let s = run_ssd_batch(cfg)?;
    let r = s.hit_rates();
    Ok(FanoutRow {
        strategy,
        x,
        plan: plan_string(&cfg.primary_plan),
        miss_rate_p: r.p_hit_p.map(|h| 1.0 - h),
        miss_rate_b: r.p_hit_b.map(|h| 1.0 - h),
        hit_rate: s.hit_rate(),
        tokens_per_vtime: s.tokens_per_vtime(),
    })
}

/// Every grid point runs with replication 0's seed, so strategies are
/// compared on paired randomness.
pub fn cmd_sweep_fanout(p: &Prepared) -> Result<CommandOutput> {
    let sweep = &p.config.sweep;
    if sweep.fanouts.is_empty() && sweep.budgets.is_empty() {
        bail!("sweep-fanout needs a nonempty sweep.fanouts or sweep.budgets grid");
    }
    let k = p.sim.k;
    let alpha = p.pair.measured_alpha();
    let mut jobs: Vec<(&'static str, usize, PlanSpec)> = Vec::new();
    for &f in &sweep.fanouts {
        jobs.push(("constant", f, PlanSpec::Constant { fanout: f }));
    }
    for &b in &sweep.budgets {
        jobs.push(("uniform", b, PlanSpec::Uniform { budget: b }));
        jobs.push((
            "geometric",
            b,
            PlanSpec::Geometric {
                budget: b,
                r: sweep.r,
            },
        ));
    }
    let base = p.replica(0);
    let rows = par_map(jobs.len() as u64, |i| {
        let (strategy, x, spec) = &jobs[i as usize];
        let mut cfg = base.clone();
        cfg.primary_plan = build_plan(spec, k, alpha, Origin::Primary)?;
        cfg.backup_plan = build_plan(spec, k, alpha, Origin::Backup)?;
        fanout_row(strategy, *x, &cfg)
    })?;

    let mut out = CommandOutput::new(to_csv(&rows)?);
    let curve: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| r.strategy == "constant")
        .filter_map(|r| r.miss_rate_p.map(|m| (r.x as u64, m)))
        .filter(|&(f, m)| f > 0 && m > 0.0)
        .collect();
    if curve.len() >= 2 {
        match fit_powerlaw(&curve) {
            Ok(fit) => out.notes.push(format!(
                "power-law fit of primary miss rate: r = {:.4}, R^2 = {:.4}",
                fit.r, fit.r_squared
            )),
            Err(e) => out.notes.push(format!("power-law fit failed: {e}")),
        }
    }
    for &b in &sweep.budgets {
        let speed = |name| {
            rows.iter()
                .find(|r| r.strategy == name && r.x == b)
                .map(|r| r.tokens_per_vtime)
                .unwrap_or(f64::NAN)
        };
        out.notes.push(format!(
            "budget {b}: geometric {:.4} vs uniform {:.4} tokens per unit time",
            speed("geometric"),
            speed("uniform")
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CRow {
    pub scheme: &'static str,
    pub c: Option<f64>,
    pub temperature: f64,
    /// Mean over contexts of the per-position acceptance rate.
    pub acceptance_rate: f64,
    pub hit_rate: f64,
    /// Mean over contexts of the probability that a rejection bonus lands in
    /// the down-weighted set.
    pub exact_hit_rate: Option<f64>,
    pub tokens_per_vtime: f64,
}

pub fn cmd_sweep_c(p: &Prepared) -> Result<CommandOutput> {
    let sweep = &p.config.sweep;
    if sweep.c_grid.is_empty() {
        bail!("sweep-c needs a nonempty sweep.c_grid");
    }
    let fanout = match (sweep.saguaro_fanout, p.sim.scheme) {
        (Some(f), _) => f,
        (None, SamplingScheme::Saguaro { fanout, .. }) => fanout,
        (None, SamplingScheme::Standard { .. }) => p.sim.primary_plan.f[0].max(1),
    };
    let temps = if sweep.temperatures.is_empty() {
        vec![p.sim.scheme.temperature()]
    } else {
        sweep.temperatures.clone()
    };
    let mut jobs: Vec<SamplingScheme> = Vec::new();
    for &temperature in &temps {
        jobs.push(SamplingScheme::Standard { temperature });
        for &downweight in &sweep.c_grid {
            jobs.push(SamplingScheme::Saguaro {
                fanout,
                downweight,
                temperature,
            });
        }
    }
    for s in &jobs {
        s.validate(p.pair.vocab())?;
    }
    let base = p.replica(0);
    let rows = par_map(jobs.len() as u64, |i| {
        let scheme = jobs[i as usize];
        let mut cfg = base.clone();
        cfg.scheme = scheme;
        let s = run_ssd_batch(&cfg)?;
        let (acc, exact) = exact_columns(p, &scheme)?;
        Ok(CRow {
            scheme: match scheme {
                SamplingScheme::Standard { .. } => "standard",
                SamplingScheme::Saguaro { .. } => "saguaro",
            },
            c: match scheme {
                SamplingScheme::Saguaro { downweight, .. } => Some(downweight),
                SamplingScheme::Standard { .. } => None,
            },
            temperature: scheme.temperature(),
            acceptance_rate: acc,
            hit_rate: s.hit_rate(),
            exact_hit_rate: exact,
            tokens_per_vtime: s.tokens_per_vtime(),
        })
    })?;
    Ok(CommandOutput::new(to_csv(&rows)?))
}

fn exact_columns(p: &Prepared, scheme: &SamplingScheme) -> Result<(f64, Option<f64>)> {
    let n = p.pair.target.num_contexts();
    let mut acc = 0.0;
    let mut hit = 0.0;
    for ctx in 0..n {
        let z = p.pair.draft.row_logits(ctx);
        let pt = p.pair.target.row_probs(ctx);
        acc += acceptance_rate(pt, &apply_scheme(z, scheme)?)?;
        if let SamplingScheme::Saguaro {
            fanout,
            downweight,
            temperature,
        } = *scheme
        {
            hit += residual_hit_probability(pt, z, fanout, downweight, temperature)?;
        }
    }
    let saguaro = matches!(scheme, SamplingScheme::Saguaro { .. });
    Ok((acc / n as f64, saguaro.then(|| hit / n as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub b: usize,
    pub backup_kind: &'static str,
    pub tokens_per_vtime: f64,
    pub analytic: f64,
    pub hit_rate: f64,
}

fn kind_str(k: BackupKind) -> &'static str {
    match k {
        BackupKind::SamePrimaryJit => "same_primary_jit",
        BackupKind::FastRandom => "fast_random",
    }
}

/// Slow backup redrafts with the primary (`T_b = T_p`); fast backup is free
/// (`T_b = 0`).
pub fn cmd_sweep_batch(p: &Prepared) -> Result<CommandOutput> {
    let grid = &p.config.sweep.batch_grid;
    if grid.is_empty() {
        bail!("sweep-batch needs a nonempty sweep.batch_grid");
    }
    let t_p = p.sim.timing.t_p;
    let kinds = [
        (BackupKind::SamePrimaryJit, TimingParams::new(t_p, t_p)?),
        (BackupKind::FastRandom, TimingParams::new(t_p, 0.0)?),
    ];
    let base = p.replica(0);
    let jobs: Vec<(usize, usize)> = grid
        .iter()
        .flat_map(|&b| (0..kinds.len()).map(move |k| (b, k)))
        .collect();
    let rows = par_map(jobs.len() as u64, |i| {
        let (b, k) = jobs[i as usize];
        let mut cfg = base.clone();
        cfg.batch_size = b;
        cfg.backup_kind = kinds[k].0;
        cfg.timing = kinds[k].1;
        let s = run_ssd_batch(&cfg)?;
        debug_assert_eq!(s.mode, Mode::Ssd);
        Ok(BatchRow {
            b,
            backup_kind: kind_str(kinds[k].0),
            tokens_per_vtime: s.tokens_per_vtime(),
            analytic: analytic_speedup(&s, &cfg),
            hit_rate: s.hit_rate(),
        })
    })?;

    let mut out = CommandOutput::new(to_csv(&rows)?);
    let speed = |b: usize, kind: &str| {
        rows.iter()
            .find(|r| r.b == b && r.backup_kind == kind)
            .map(|r| r.tokens_per_vtime)
    };
    let crossover = grid
        .iter()
        .find(|&&b| speed(b, "fast_random") >= speed(b, "same_primary_jit"));
    out.notes.push(match crossover {
        Some(b) => format!("simulated crossover at b = {b}"),
        None => "no simulated crossover on the grid".into(),
    });
    if let Some(note) = predicted_crossover(&base, t_p)? {
        out.notes.push(note);
    }
    Ok(out)
}

/// Closed-form crossover using the slow backup's hit rate and yield and the
/// fast backup's measured tokens per round, both at b = 1.
fn predicted_crossover(base: &SimConfig, t_p: f64) -> Result<Option<String>> {
    let mut slow = base.clone();
    slow.batch_size = 1;
    slow.backup_kind = BackupKind::SamePrimaryJit;
    slow.timing = TimingParams::new(t_p, t_p)?;
    let mut fast = slow.clone();
    fast.backup_kind = BackupKind::FastRandom;
    fast.timing = TimingParams::new(t_p, 0.0)?;
    let s = run_ssd_batch(&slow)?;
    let f = run_ssd_batch(&fast)?;
    let p = s.hit_rate();
    if !(p > 0.0 && p < 1.0) {
        return Ok(None);
    }
    let e_hit = s.tokens_per_round();
    let y = TokenYields {
        e_hit,
        e_miss: (f.tokens_per_round() - p * e_hit) / (1.0 - p),
        e_sd: e_hit,
        t_sd: t_p,
    };
    Ok(Some(match critical_batch(p, &y, &slow.timing) {
        Ok(cb) => format!(
            "predicted critical batch b* = {:.3} (switch at {})",
            cb.b_star, cb.switch_at
        ),
        Err(e) => format!("no predicted crossover: {e}"),
    }))
}
