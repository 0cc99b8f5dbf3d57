//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ssd_core::cache::{
    conditional_hit_rate, geometric_fanout, geometric_fanout_continuous, lagrange_residual,
    rejection_hit_rate, residual_hit_probability, FanOutPlan,
};
use ssd_core::dist::{
    acceptance_rate, apply_scheme, residual, top_f, top_f_excluding, Categorical, Logits,
    SamplingScheme,
};
use ssd_core::hitmodel::{fit_powerlaw, phit_recurrence, unconditional_phit, HitRates};
use ssd_core::lm::{calibrate_pair, derive_draft, make_lm, LmPair};
use ssd_core::perf::{
    critical_batch, overhead_estimate_with_width, sandwich_bounds, speedup_fast_backup, speedup_sd,
    speedup_slow_backup, speedup_ssd, TimingParams, TokenYields,
};
use ssd_core::sim::{
    run_ar, run_protocol_harness, run_sd, run_ssd, run_ssd_batch, BackupKind, RunStats, SimConfig,
};
use ssd_core::specdec::{exact_round_distribution, losslessness_gap, Origin};
use ssd_core::stats::transition_homogeneity;

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {id:>2}: {name} [{detail}] ({:.2}s)",
            elapsed.as_secs_f64()
        );
        if !pass {
            self.failures += 1;
        }
    }
}

fn pair(v: usize, m: usize, alpha: f64, seed: u64) -> Arc<LmPair> {
    let target = make_lm(v, m, 0.5, seed).unwrap();
    Arc::new(calibrate_pair(&target, alpha, seed + 1).unwrap())
}

fn config(
    pair: Arc<LmPair>,
    k: usize,
    primary: Vec<usize>,
    backup: Vec<usize>,
    t_p: f64,
    backup_kind: BackupKind,
    t_b: f64,
) -> SimConfig {
    let bp: usize = primary.iter().sum();
    let bb: usize = backup.iter().sum();
    let mut cfg = SimConfig::basic(pair, k, 0, TimingParams::new(t_p, t_b).unwrap());
    cfg.primary_plan = FanOutPlan::new(primary, Origin::Primary, bp).unwrap();
    cfg.backup_plan = FanOutPlan::new(backup, Origin::Backup, bb).unwrap();
    cfg.backup_kind = backup_kind;
    cfg.initial_context = vec![0];
    cfg.record = false;
    cfg
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn theorem1_analytic(stats: &RunStats, timing: &TimingParams) -> f64 {
    let y = TokenYields {
        e_hit: stats.e_hit().unwrap_or(1.0),
        e_miss: stats.e_miss().unwrap_or(1.0),
        e_sd: 1.0,
        t_sd: 0.0,
    };
    speedup_ssd(stats.hit_rate(), &y, timing)
}

fn criterion1(r: &mut Report) {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let target = make_lm(6, 1, 0.7, 101).unwrap();
    let mut schemes = vec![SamplingScheme::Standard { temperature: 1.0 }];
    for c in [0.2, 0.5, 1.0] {
        schemes.push(SamplingScheme::Saguaro {
            fanout: 2,
            downweight: c,
            temperature: 1.0,
        });
    }
    for (j, eps) in [0.2, 0.6, 1.0].into_iter().enumerate() {
        let draft = derive_draft(&target, eps, 200 + j as u64).unwrap();
        for scheme in &schemes {
            for ctx in 0..6 {
                let law = exact_round_distribution(&target, &draft, &[ctx], 3, scheme).unwrap();
                worst = worst.max(losslessness_gap(&target, &[ctx], &law, 3));
            }
        }
    }
    let el = t0.elapsed();
    r.record(
        1,
        "exact losslessness, V=6 m=1 K=3",
        worst < 1e-10 && el.as_secs_f64() < 5.0,
        format!("max TV {worst:.2e} < 1e-10, runtime < 5s"),
        el,
    );
}

fn criterion2(r: &mut Report) {
    let t0 = Instant::now();
    let n_tokens = 200_000usize;
    let p = pair(32, 1, 0.8, 7);
    let mut cfg = config(
        p.clone(),
        4,
        vec![3, 2, 2, 2, 4],
        vec![3, 1, 1, 1, 2],
        0.5,
        BackupKind::FastRandom,
        0.0,
    );
    cfg.scheme = SamplingScheme::Saguaro {
        fanout: 3,
        downweight: 0.5,
        temperature: 1.0,
    };
    cfg.record = true;
    cfg.rounds = n_tokens as u64 / 2;
    cfg.seed = 2024;
    let mut ssd = run_ssd(&cfg).unwrap();
    while ssd.streams[0].len() < n_tokens {
        cfg.rounds *= 2;
        ssd = run_ssd(&cfg).unwrap();
    }
    let stream = &ssd.streams[0][..n_tokens];
    let ar = run_ar(&p.target, &cfg.initial_context, n_tokens as u64, 77);
    let test = transition_homogeneity(32, 1, &cfg.initial_context, stream, &ar.streams[0]);
    let el = t0.elapsed();
    r.record(
        2,
        "end-to-end losslessness, FastRandom backup, V=32 K=4, 2e5 tokens",
        test.p_value > 0.001 && el.as_secs_f64() < 60.0,
        format!(
            "chi2 {:.1} on {} dof, p = {:.4} > 0.001, hit rate {:.3}",
            test.statistic,
            test.dof,
            test.p_value,
            ssd.hit_rate()
        ),
        el,
    );
}

fn criterion3(r: &mut Report) {
    let t0 = Instant::now();
    let pt = Categorical::new(vec![0.48, 0.48, 0.02, 0.02]).unwrap();
    let pd = Categorical::new(vec![0.49, 0.49, 0.01, 0.01]).unwrap();
    let z = Logits::from_probs(pd.probs()).unwrap();
    let sag = SamplingScheme::Saguaro {
        fanout: 2,
        downweight: 47.0 / 147.0,
        temperature: 1.0,
    };
    let pd2 = apply_scheme(&z, &sag).unwrap();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    let a1 = acceptance_rate(&pt, &pd).unwrap();
    let a2 = acceptance_rate(&pt, &pd2).unwrap();
    let r1 = residual(&pt, &pd).unwrap();
    let r2 = residual(&pt, &pd2).unwrap();
    let h1 = rejection_hit_rate(&pt, &z, &SamplingScheme::default(), 2)
        .unwrap()
        .unwrap();
    let h2 = rejection_hit_rate(&pt, &z, &sag, 2).unwrap().unwrap();
    let pass = (a1 - 0.98).abs() < 1e-12
        && (a2 - 0.98).abs() < 1e-12
        && close(r1.probs(), &[0.0, 0.0, 0.5, 0.5])
        && close(r2.probs(), &[0.5, 0.5, 0.0, 0.0])
        && (h1 - 0.5).abs() < 1e-12
        && (h2 - 1.0).abs() < 1e-12
        && close(pd2.probs(), &[0.47, 0.47, 0.03, 0.03]);
    r.record(
        3,
        "four-token down-weighting example",
        pass,
        format!(
            "alpha {a1:.12}/{a2:.12}, hit {h1:.12}/{h2:.12}, p_d' {:?}",
            pd2.probs()
        ),
        t0.elapsed(),
    );
}

fn criterion4(r: &mut Report) {
    let t0 = Instant::now();
    let mut sag = config(
        pair(24, 1, 0.85, 40),
        5,
        vec![3, 2, 2, 2, 2, 4],
        vec![2, 1, 1, 1, 1, 2],
        0.7,
        BackupKind::FastRandom,
        0.05,
    );
    sag.scheme = SamplingScheme::Saguaro {
        fanout: 3,
        downweight: 0.5,
        temperature: 1.0,
    };
    let geo = geometric_fanout(0.9, 1.0, 4, 16, Origin::Primary)
        .unwrap()
        .f;
    let sets = vec![
        config(
            pair(16, 1, 0.8, 10),
            3,
            vec![2; 4],
            vec![2; 4],
            0.5,
            BackupKind::SamePrimaryJit,
            0.5,
        ),
        config(
            pair(32, 1, 0.9, 20),
            4,
            geo.clone(),
            geo,
            0.3,
            BackupKind::FastRandom,
            0.0,
        ),
        config(
            pair(8, 1, 0.6, 30),
            2,
            vec![3; 3],
            vec![3; 3],
            1.2,
            BackupKind::SamePrimaryJit,
            1.2,
        ),
        sag,
        config(
            pair(12, 2, 0.7, 50),
            1,
            vec![4, 6],
            vec![4, 6],
            0.2,
            BackupKind::SamePrimaryJit,
            0.2,
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (i, mut cfg) in sets.into_iter().enumerate() {
        cfg.rounds = 100_000;
        cfg.seed = 400 + i as u64;
        let s = run_ssd(&cfg).unwrap();
        let analytic = theorem1_analytic(&s, &cfg.timing);
        let rel = (s.tokens_per_vtime() - analytic).abs() / analytic;
        worst = worst.max(rel);
        details.push(format!("{:.3}", s.tokens_per_vtime()));
    }
    let el = t0.elapsed();
    r.record(
        4,
        "speedup formula with measured p_hit, E_hit, E_miss, 5 sets x 1e5 rounds",
        worst < 0.01 && el.as_secs_f64() < 120.0,
        format!(
            "max rel err {worst:.2e} < 1%, speedups {}",
            details.join("/")
        ),
        el,
    );
}

fn criterion5(r: &mut Report) {
    let t0 = Instant::now();
    let p = pair(16, 1, 0.8, 60);
    let mut ssd_speeds = Vec::new();
    let mut all_ge = true;
    let mut min_hit: f64 = 1.0;
    for seed in 0..20u64 {
        let mut cfg = config(
            p.clone(),
            3,
            vec![2; 4],
            vec![2; 4],
            0.3,
            BackupKind::SamePrimaryJit,
            0.3,
        );
        cfg.rounds = 20_000;
        cfg.seed = 5000 + seed;
        let ssd = run_ssd(&cfg).unwrap();
        let sd = run_sd(&cfg).unwrap();
        all_ge &= ssd.tokens_per_vtime() >= sd.tokens_per_vtime();
        min_hit = min_hit.min(ssd.hit_rate());
        ssd_speeds.push(ssd.tokens_per_vtime() - sd.tokens_per_vtime());
    }
    let (mean_gap, _) = mean_sd(&ssd_speeds);
    r.record(
        5,
        "SSD never slower than SD with primary = backup, T = 0.3, 20 paired seeds",
        all_ge && mean_gap > 0.0 && min_hit > 0.0,
        format!("all seeds SSD >= SD: {all_ge}, mean gain {mean_gap:.4} tok/unit, min p_hit {min_hit:.3}"),
        t0.elapsed(),
    );
}

fn criterion6(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut analytic_ok = true;
    for _ in 0..1000 {
        let e_miss = 1.0 + 4.0 * rng.random::<f64>();
        let e_hit = e_miss + 4.0 * rng.random::<f64>();
        let y = TokenYields {
            e_hit,
            e_miss,
            e_sd: 1.0 + 7.0 * rng.random::<f64>(),
            t_sd: rng.random::<f64>(),
        };
        let t = TimingParams::new(0.999 * rng.random::<f64>(), 0.0).unwrap();
        let p = rng.random::<f64>();
        let ratio = speedup_ssd(p, &y, &t) / speedup_sd(y.e_sd, y.t_sd);
        let (lo, hi) = sandwich_bounds(&y, p);
        analytic_ok &= ratio >= lo * (1.0 - 1e-12) && ratio <= hi * (1.0 + 1e-12);
    }
    let sets = [
        (16, 0.8, 3, vec![2; 4], 0.5),
        (32, 0.9, 4, vec![3, 2, 2, 2, 3], 0.3),
        (8, 0.6, 2, vec![3; 3], 0.8),
        (24, 0.7, 3, vec![4, 3, 2, 4], 0.2),
        (12, 0.85, 5, vec![2; 6], 0.6),
    ];
    let mut sim_ok = true;
    let mut details = Vec::new();
    for (i, (v, alpha, k, plan, t_p)) in sets.into_iter().enumerate() {
        let p = pair(v, 1, alpha, 600 + i as u64);
        let (mut ratios, mut los, mut his) = (Vec::new(), Vec::new(), Vec::new());
        for rep in 0..10u64 {
            let mut cfg = config(
                p.clone(),
                k,
                plan.clone(),
                plan.clone(),
                t_p,
                BackupKind::FastRandom,
                0.0,
            );
            cfg.rounds = 20_000;
            cfg.seed = 6000 + 100 * i as u64 + rep;
            let ssd = run_ssd(&cfg).unwrap();
            let sd = run_sd(&cfg).unwrap();
            let y = TokenYields {
                e_hit: ssd.e_hit().unwrap(),
                e_miss: ssd.e_miss().unwrap_or(1.0),
                e_sd: sd.tokens_per_round(),
                t_sd: t_p,
            };
            let (lo, hi) = sandwich_bounds(&y, ssd.hit_rate());
            ratios.push(ssd.tokens_per_vtime() / sd.tokens_per_vtime());
            los.push(lo);
            his.push(hi);
        }
        let (m, sd) = mean_sd(&ratios);
        let se = sd / (ratios.len() as f64).sqrt();
        let lo = mean_sd(&los).0;
        let hi = mean_sd(&his).0;
        sim_ok &= m >= lo - 2.0 * se && m <= hi + 2.0 * se;
        details.push(format!("{lo:.3}<={m:.3}<={hi:.3}"));
    }
    r.record(
        6,
        "sandwich bounds, 1000 analytic tuples + 5 simulated configs (2 sigma)",
        analytic_ok && sim_ok,
        format!("analytic {analytic_ok}, simulated {}", details.join(", ")),
        t0.elapsed(),
    );
}

/// Exact probability that a round verifying a speculation drafted from
/// `pd` (at every position, since the LM has order 0) lands in the cache.
fn exact_conditional_hit(pt: &Categorical, pd: &Categorical, z: &Logits, plan: &[usize]) -> f64 {
    let k = plan.len() - 1;
    let alpha = acceptance_rate(pt, pd).unwrap();
    let res = residual(pt, pd).unwrap();
    let mut total = 0.0;
    for (pos, &f) in plan.iter().enumerate().take(k) {
        let mut reject_hit = 0.0;
        for x in 0..pt.len() {
            let qd = pd.prob(x);
            if qd == 0.0 {
                continue;
            }
            let reject = qd * (1.0 - (pt.prob(x) / qd).min(1.0));
            let cached: f64 = top_f_excluding(z.values(), f, Some(x))
                .into_iter()
                .map(|b| res.prob(b))
                .sum();
            reject_hit += reject * cached;
        }
        total += alpha.powi(pos as i32) * reject_hit;
    }
    let last: f64 = top_f(z.values(), plan[k])
        .into_iter()
        .map(|b| pt.prob(b))
        .sum();
    total + alpha.powi(k as i32) * last
}

fn criterion7(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    let mut tested = 0;
    while tested < 1000 {
        let (pp, pb) = (rng.random::<f64>(), rng.random::<f64>());
        let Ok(h) = HitRates::new(pp, pb) else {
            continue;
        };
        tested += 1;
        let rec = phit_recurrence(&h, 2000);
        let limit = unconditional_phit(&h);
        worst = worst.max((rec.iterated[2000] - limit).abs());
        for (a, b) in rec.iterated.iter().zip(&rec.closed_form) {
            worst = worst.max((a - b).abs());
        }
    }
    let algebra_ok = worst < 1e-9;

    // Order-0 models make every round an independent draw given the origin
    // of the speculation being verified, so the true conditional rates are
    // computable exactly.
    let v = 12;
    let target = make_lm(v, 0, 0.8, 70).unwrap();
    let draft = derive_draft(&target, 0.5, 71).unwrap();
    let p = Arc::new(LmPair::new(target, draft).unwrap());
    let primary_plan = vec![4, 3, 3, 5];
    let backup_plan = vec![2, 1, 1, 2];
    let mut cfg = config(
        p.clone(),
        3,
        primary_plan.clone(),
        backup_plan.clone(),
        0.5,
        BackupKind::FastRandom,
        0.0,
    );
    cfg.rounds = 100_000;
    cfg.seed = 7070;
    let s = run_ssd(&cfg).unwrap();
    let pt = p.target.row_probs(0);
    let pd = p.draft.row_probs(0);
    let z = p.draft.row_logits(0);
    let true_p = exact_conditional_hit(pt, pd, z, &primary_plan);
    let true_b = exact_conditional_hit(pt, &Categorical::uniform(v), z, &backup_plan);
    let h = HitRates::new(true_p, true_b).unwrap();
    let true_all = unconditional_phit(&h);
    let rates = s.hit_rates();
    let binom = |p: f64, n: u64| (p * (1.0 - p) / n as f64).sqrt();
    let d = true_p - true_b;
    let sigma_all =
        (true_all * (1.0 - true_all) * (1.0 + d) / ((1.0 - d) * s.rounds as f64)).sqrt();
    let zp = (rates.p_hit_p.unwrap() - true_p) / binom(true_p, rates.rounds_after_primary);
    let zb = (rates.p_hit_b.unwrap() - true_b) / binom(true_b, rates.rounds_after_backup);
    let za = (rates.overall.unwrap() - true_all) / sigma_all;
    let sim_ok = zp.abs() < 3.0 && zb.abs() < 3.0 && za.abs() < 3.0;
    r.record(
        7,
        "hit-rate algebra and simulated conditional rates",
        algebra_ok && sim_ok,
        format!(
            "max recurrence err {worst:.1e}; p_p {true_p:.4} (z {zp:.2}), p_b {true_b:.4} (z {zb:.2}), p {true_all:.4} (z {za:.2})"
        ),
        t0.elapsed(),
    );
}

fn brute_force_best(a: f64, r: f64, k: usize, budget: usize) -> f64 {
    fn rec(f: &mut Vec<usize>, left: usize, n: usize, a: f64, r: f64, best: &mut f64) {
        if f.len() == n {
            *best = best.max(conditional_hit_rate(f, a, r));
            return;
        }
        for x in 0..=left {
            f.push(x);
            rec(f, left - x, n, a, r, best);
            f.pop();
        }
    }
    let mut best = 0.0;
    rec(&mut Vec::new(), budget, k + 1, a, r, &mut best);
    best
}

fn criterion8(r: &mut Report) {
    let t0 = Instant::now();
    let mut worst_gap: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for budget in 3..=12 {
        for rr in [0.5, 1.0, 2.0] {
            for a in [0.3, 0.6, 0.9] {
                let plan = geometric_fanout(a, rr, 2, budget, Origin::Primary).unwrap();
                let got = conditional_hit_rate(&plan.f, a, rr);
                let best = brute_force_best(a, rr, 2, budget);
                if best > 0.0 {
                    worst_gap = worst_gap.max((best - got) / best);
                }
                let cont = geometric_fanout_continuous(a, rr, 2, budget as f64).unwrap();
                worst_res = worst_res.max(lagrange_residual(&cont, a, rr));
            }
        }
    }
    let el = t0.elapsed();
    r.record(
        8,
        "geometric fan-out vs exhaustive integer optimum, K=2 B<=12",
        worst_gap <= 0.02 && worst_res < 1e-9 && el.as_secs_f64() < 10.0,
        format!("max rel gap {worst_gap:.2e} <= 2%, max Lagrange residual {worst_res:.1e} < 1e-9"),
        el,
    );
}

fn criterion9(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let grid: Vec<f64> = (0..=5).rev().map(|i| i as f64 * 0.2).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let v = rng.random_range(3..=20);
        let f = rng.random_range(1..v);
        let z = Logits::new((0..v).map(|_| 3.0 * rng.random::<f64>() - 1.5).collect()).unwrap();
        let w: Vec<f64> = (0..v).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = w.iter().sum();
        let pt = Categorical::new(w.iter().map(|x| x / total).collect()).unwrap_or_else(|_| {
            let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
            let s: f64 = p.iter().sum();
            p[0] += 1.0 - s;
            Categorical::new(p).unwrap()
        });
        let mut prev = f64::NEG_INFINITY;
        for &c in &grid {
            let h = residual_hit_probability(&pt, &z, f, c, 1.0).unwrap();
            worst = worst.max(prev - h);
            prev = h;
        }
    }
    r.record(
        9,
        "Saguaro hit probability nonincreasing in C, 1000 instances",
        worst <= 1e-12,
        format!(
            "max increase along decreasing C {:.1e} <= 1e-12",
            worst.max(0.0)
        ),
        t0.elapsed(),
    );
}

fn criterion10(r: &mut Report) {
    let t0 = Instant::now();
    // Bisection oracle for the closed form.
    let mut oracle_worst: f64 = 0.0;
    for (p, e_hit, e_miss, t_p) in [
        (0.8, 5.0, 2.0, 0.5),
        (0.9, 4.0, 1.5, 0.9),
        (0.7, 3.0, 1.2, 0.3),
    ] {
        let y = TokenYields {
            e_hit,
            e_miss,
            e_sd: e_miss,
            t_sd: t_p,
        };
        let t = TimingParams::new(t_p, 0.0).unwrap();
        let cb = critical_batch(p, &y, &t).unwrap();
        let fast = speedup_fast_backup(p, &y);
        let (mut lo, mut hi) = (0.0, 1e4);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if speedup_slow_backup(p, e_hit, t_p, mid) > fast {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        oracle_worst = oracle_worst.max((cb.b_star - 0.5 * (lo + hi)).abs());
    }

    // Simulated crossover: slow backup redrafts with the primary
    // (T_b = T_p); fast backup returns random tokens (T_b = 0).
    let sets = [
        (16, 0.9, 4, vec![2; 5], 0.3, 101u64),
        (16, 0.9, 4, vec![3; 5], 0.35, 102),
        (12, 0.85, 3, vec![2; 4], 0.3, 103),
    ];
    let mut sim_ok = true;
    let mut details = Vec::new();
    for (v, alpha, k, plan, t_p, seed) in sets {
        let p = pair(v, 1, alpha, 90);
        let slow_cfg = config(
            p.clone(),
            k,
            plan.clone(),
            plan.clone(),
            t_p,
            BackupKind::SamePrimaryJit,
            t_p,
        );
        let fast_cfg = config(
            p.clone(),
            k,
            plan.clone(),
            plan.clone(),
            t_p,
            BackupKind::FastRandom,
            0.0,
        );
        let calib = |mut c: SimConfig| {
            c.rounds = 100_000;
            c.seed = seed * 10;
            run_ssd(&c).unwrap()
        };
        let slow1 = calib(slow_cfg.clone());
        let fast1 = calib(fast_cfg.clone());
        let ph = slow1.hit_rate();
        let e_hit = slow1.tokens_per_round();
        let fast_num = fast1.tokens_per_round();
        let e_miss_eff = (fast_num - ph * e_hit) / (1.0 - ph);
        let y = TokenYields {
            e_hit,
            e_miss: e_miss_eff,
            e_sd: e_hit,
            t_sd: t_p,
        };
        let predicted = critical_batch(ph, &y, &slow_cfg.timing);
        let mut crossover = None;
        for b in 1..=32usize {
            let run = |mut c: SimConfig| {
                c.batch_size = b;
                c.rounds = 20_000;
                c.seed = seed * 1000 + b as u64;
                run_ssd_batch(&c).unwrap().tokens_per_vtime()
            };
            if run(fast_cfg.clone()) >= run(slow_cfg.clone()) {
                crossover = Some(b);
                break;
            }
        }
        match (predicted, crossover) {
            (Ok(cb), Some(b)) => {
                sim_ok &= b.abs_diff(cb.switch_at as usize) <= 1;
                details.push(format!(
                    "b*={:.2} switch at {} sim {b}",
                    cb.b_star, cb.switch_at
                ));
            }
            (pred, sim) => {
                sim_ok = false;
                details.push(format!("predicted {pred:?}, simulated {sim:?}"));
            }
        }
    }
    r.record(
        10,
        "critical batch size: bisection oracle and simulated crossover",
        oracle_worst < 1e-9 && sim_ok,
        format!("oracle err {oracle_worst:.1e}; {}", details.join(", ")),
        t0.elapsed(),
    );
}

fn criterion11(r: &mut Report) {
    let t0 = Instant::now();
    let exact: Vec<(u64, f64)> = (1..=16).map(|f| (f, (f as f64).powf(-1.3))).collect();
    let e_exact = (fit_powerlaw(&exact).unwrap().r - 1.3).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut worst_noisy: f64 = 0.0;
    for r0 in [0.5, 1.0, 2.0] {
        let samples: Vec<(u64, f64)> = (1..=20u64)
            .map(|f| {
                let m: f64 = (f as f64).powf(-r0) * f64::exp(noise.sample(&mut rng));
                (f, m.min(1.0))
            })
            .collect();
        let fit = fit_powerlaw(&samples).unwrap();
        worst_noisy = worst_noisy.max((fit.r - r0).abs() / r0);
    }
    r.record(
        11,
        "power-law exponent recovery",
        e_exact < 1e-9 && worst_noisy < 0.05,
        format!("noiseless err {e_exact:.1e} < 1e-9, noisy rel err {worst_noisy:.3} < 5%"),
        t0.elapsed(),
    );
}

fn criterion12(r: &mut Report) {
    let t0 = Instant::now();
    let p = pair(16, 1, 0.8, 120);
    let mut cfg = config(
        p,
        3,
        vec![2; 4],
        vec![2; 4],
        0.6,
        BackupKind::SamePrimaryJit,
        0.6,
    );
    cfg.batch_size = 4;
    cfg.rounds = 500;
    cfg.seed = 12;
    let a = run_protocol_harness(&cfg);
    let b = run_protocol_harness(&cfg);
    let pass = match (&a, &b) {
        (Ok(a), Ok(b)) => {
            a.messages_d2v == cfg.rounds
                && a.messages_v2d == cfg.rounds
                && a.transcript.len() as u64 == 2 * cfg.rounds
                && a.transcript_jsonl() == b.transcript_jsonl()
                && a.stats == run_ssd_batch(&cfg).unwrap()
        }
        _ => false,
    };
    let detail = match &a {
        Ok(o) => format!(
            "{} d2v / {} v2d messages for {} rounds, replay identical, overlap invariant held",
            o.messages_d2v, o.messages_v2d, cfg.rounds
        ),
        Err(e) => e.to_string(),
    };
    r.record(12, "protocol harness", pass, detail, t0.elapsed());
}

fn criterion13(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1313);
    let mut ok = true;
    for _ in 0..100 {
        let b: u64 = rng.random_range(1..64);
        let k: u64 = rng.random_range(1..9);
        let f: u64 = rng.random_range(1..33);
        let v: u64 = rng.random_range(2..1025);
        let w: u64 = rng.random_range(1..65);
        let c_milli: u64 = rng.random_range(1..1000);
        let o = overhead_estimate_with_width(b, k, f, v, c_milli as f64 / 1000.0, w);
        let tokens = b as u128 * k as u128 * (k as u128 + 1) * f as u128;
        let bits = tokens * (v as u128 + 1) * w as u128;
        // c = c_milli / 1000 exactly, so the multiplier is an exact rational.
        let flops = (c_milli * (k + 1) * f) as f64 / 1000.0;
        ok &= o.draft_tokens_per_round as u128 == tokens
            && o.cache_bits as u128 == bits
            && (o.flop_multiplier_vs_sd - flops).abs() <= 2.0 * f64::EPSILON * flops;
    }
    r.record(
        13,
        "overhead accounting, 100 random tuples",
        ok,
        "draft tokens and cache bits exact, FLOP multiplier within 2 ulp".into(),
        t0.elapsed(),
    );
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    criterion1(&mut r);
    criterion2(&mut r);
    criterion3(&mut r);
    criterion4(&mut r);
    criterion5(&mut r);
    criterion6(&mut r);
    criterion7(&mut r);
    criterion8(&mut r);
    criterion9(&mut r);
    criterion10(&mut r);
    criterion11(&mut r);
    criterion12(&mut r);
    criterion13(&mut r);
    if r.failures == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance criteria failed", r.failures);
        ExitCode::FAILURE
    }
}
