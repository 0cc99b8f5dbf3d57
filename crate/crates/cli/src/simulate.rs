use anyhow::Result;
use serde::Serialize;

use ssd_core::perf::{speedup_batch, speedup_sd, TokenYields};
use ssd_core::sim::{run_ar, run_sd, run_ssd_batch, Mode, RunStats, SimConfig};

use crate::config::Prepared;
use crate::{par_map, to_csv, CommandOutput};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub run_id: u64,
    pub mode: &'static str,
    pub b: usize,
    pub rounds: u64,
    pub tokens: u64,
    pub vtime: f64,
    pub tokens_per_vtime: f64,
    pub hit_rate: Option<f64>,
    pub hit_rate_p: Option<f64>,
    pub hit_rate_b: Option<f64>,
    pub mean_accepted: Option<f64>,
    pub analytic_speedup: f64,
    pub rel_err: f64,
}

/// Speedup predicted from the run's own measured hit rate and yields.
pub fn analytic_speedup(stats: &RunStats, cfg: &SimConfig) -> f64 {
    match stats.mode {
        Mode::Ar => 1.0,
        Mode::Sd => speedup_sd(stats.tokens_per_round(), cfg.timing.t_p),
        Mode::Ssd => {
            // A role that never occurred contributes nothing, so any yield
            // works in its place.
            let y = TokenYields {
                e_hit: stats.e_hit().unwrap_or(1.0),
                e_miss: stats.e_miss().unwrap_or(1.0),
                e_sd: 1.0,
                t_sd: 0.0,
            };
            speedup_batch(stats.hit_rate(), &y, &cfg.timing, stats.batch_size as u64)
        }
    }
}

pub fn run_mode(mode: Mode, cfg: &SimConfig) -> Result<RunStats> {
    Ok(match mode {
        Mode::Ar => run_ar(&cfg.pair.target, &cfg.initial_context, cfg.rounds, cfg.seed),
        Mode::Sd => run_sd(cfg)?,
        Mode::Ssd => run_ssd_batch(cfg)?,
    })
}

pub fn row(run_id: u64, stats: &RunStats, cfg: &SimConfig) -> SimRow {
    let analytic = analytic_speedup(stats, cfg);
    let speed = stats.tokens_per_vtime();
    let rates = stats.hit_rates();
    let ssd = stats.mode == Mode::Ssd;
    SimRow {
        run_id,
        mode: stats.mode.as_str(),
        b: stats.batch_size,
        rounds: stats.rounds,
        tokens: stats.tokens,
        vtime: stats.vtime,
        tokens_per_vtime: speed,
        hit_rate: ssd.then(|| stats.hit_rate()),
        hit_rate_p: if ssd { rates.p_hit_p } else { None },
        hit_rate_b: if ssd { rates.p_hit_b } else { None },
        mean_accepted: (stats.mode != Mode::Ar).then(|| stats.mean_accepted()),
        analytic_speedup: analytic,
        rel_err: (speed - analytic).abs() / analytic,
    }
}

pub fn simulate_rows(p: &Prepared) -> Result<Vec<SimRow>> {
    let modes = p.config.modes.clone();
    let per_rep = par_map(p.config.replications, |i| {
        let cfg = p.replica(i);
        modes
            .iter()
            .map(|&m| Ok(row(i, &run_mode(m, &cfg)?, &cfg)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_rep.into_iter().flatten().collect())
}

pub fn cmd_simulate(p: &Prepared) -> Result<CommandOutput> {
    let rows = simulate_rows(p)?;
    Ok(CommandOutput::new(to_csv(&rows)?))
}
