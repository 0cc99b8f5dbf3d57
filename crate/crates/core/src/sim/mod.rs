//! Virtual-clock Monte-Carlo simulation of autoregressive decoding, plain
//! speculative decoding and speculative-speculative decoding.
//!
//! Time is measured in verification passes. A round in which every sequence
//! of the batch hits its cache costs `max(1, T_p)`; any miss costs `1 + T_b`.

mod protocol;
mod sides;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, FanOutPlan};
use crate::dist::{sample, SamplingScheme};
use crate::hitmodel::{EmpiricalHitRates, RoundRecord};
use crate::lm::{LmPair, SyntheticLm, MAX_ORDER};
use crate::perf::TimingParams;
use crate::specdec::{draft, verify_with_rule, Origin, SpecError, VerifyRule};

pub use protocol::{run_protocol_harness, HarnessOutput, TranscriptEntry, WireMessage};
pub use sides::{DraftSide, VerifierSide};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupKind {
    /// Redraft with the primary model after verification (`T_b = T_p`).
    SamePrimaryJit,
    /// Uniformly random tokens with uniform recorded distributions.
    FastRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ar,
    Sd,
    Ssd,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ar => "ar",
            Mode::Sd => "sd",
            Mode::Ssd => "ssd",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub pair: Arc<LmPair>,
    pub k: usize,
    pub scheme: SamplingScheme,
    pub primary_plan: FanOutPlan,
    pub backup_plan: FanOutPlan,
    pub timing: TimingParams,
    pub backup_kind: BackupKind,
    pub batch_size: usize,
    pub rounds: u64,
    pub seed: u64,
    pub initial_context: Vec<usize>,
    pub verify_rule: VerifyRule,
    /// Keep emitted token streams and the per-round hit log.
    pub record: bool,
}

impl SimConfig {
    /// Single-sequence config with the same fan-out at every position for
    /// both roles.
    pub fn basic(pair: Arc<LmPair>, k: usize, fanout: usize, timing: TimingParams) -> Self {
        Self {
            pair,
            k,
            scheme: SamplingScheme::default(),
            primary_plan: FanOutPlan::constant(k, fanout, Origin::Primary),
            backup_plan: FanOutPlan::constant(k, fanout, Origin::Backup),
            timing,
            backup_kind: BackupKind::SamePrimaryJit,
            batch_size: 1,
            rounds: 1000,
            seed: 0,
            initial_context: Vec::new(),
            verify_rule: VerifyRule::Lossless,
            record: true,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        let vocab = self.pair.vocab();
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.timing
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        self.scheme
            .validate(vocab)
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        for (plan, role) in [
            (&self.primary_plan, Origin::Primary),
            (&self.backup_plan, Origin::Backup),
        ] {
            if plan.role != role {
                return bad(format!("{role:?} plan is tagged {:?}", plan.role));
            }
            if plan.lookahead() != self.k {
                return bad(format!(
                    "{role:?} plan has {} positions, expected {}",
                    plan.f.len(),
                    self.k + 1
                ));
            }
            plan.validate_for_vocab(vocab)
                .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        }
        if self.backup_kind == BackupKind::SamePrimaryJit && self.timing.t_b != self.timing.t_p {
            return bad(format!(
                "same-primary backup needs t_b == t_p, got {} and {}",
                self.timing.t_b, self.timing.t_p
            ));
        }
        if let Some(&t) = self.initial_context.iter().find(|&&t| t >= vocab) {
            return bad(format!("initial context token {t} outside vocabulary"));
        }
        Ok(())
    }
}

/// Streams per sequence: the verifier uses stream `2i`, the drafter `2i + 1`.
pub(crate) fn sequence_rngs(seed: u64, seq: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut verifier = ChaCha8Rng::seed_from_u64(seed);
    verifier.set_stream(2 * seq as u64);
    let mut drafter = ChaCha8Rng::seed_from_u64(seed);
    drafter.set_stream(2 * seq as u64 + 1);
    (verifier, drafter)
}

/// Seed for replication `index` under `root` (splitmix64 finalizer over
/// `root + (index + 1) * golden`). Adding replications never changes earlier
/// seeds.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Append tokens to a context, keeping only what the models can see.
pub(crate) fn push_context(context: &mut Vec<usize>, tokens: &[usize]) {
    context.extend_from_slice(tokens);
    if context.len() > 8 * MAX_ORDER {
        context.drain(..context.len() - MAX_ORDER);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mode: Mode,
    pub batch_size: usize,
    pub rounds: u64,
    /// Summed over the batch.
    pub tokens: u64,
    pub vtime: f64,
    pub rounds_after_primary: u64,
    pub hits_after_primary: u64,
    pub tokens_after_primary: u64,
    pub rounds_after_backup: u64,
    pub hits_after_backup: u64,
    pub tokens_after_backup: u64,
    /// Rounds in which every sequence hit.
    pub all_hit_rounds: u64,
    pub accepted_total: u64,
    #[serde(skip)]
    pub hit_log: Vec<RoundRecord>,
    /// Emitted tokens per sequence, excluding the initial context.
    #[serde(skip)]
    pub streams: Vec<Vec<usize>>,
}

impl RunStats {
    fn new(mode: Mode, batch_size: usize) -> Self {
        Self {
            mode,
            batch_size,
            rounds: 0,
            tokens: 0,
            vtime: 0.0,
            rounds_after_primary: 0,
            hits_after_primary: 0,
            tokens_after_primary: 0,
            rounds_after_backup: 0,
            hits_after_backup: 0,
            tokens_after_backup: 0,
            all_hit_rounds: 0,
            accepted_total: 0,
            hit_log: Vec::new(),
            streams: vec![Vec::new(); batch_size],
        }
    }

    /// Per-sequence tokens per unit of virtual time; autoregressive decoding
    /// scores exactly 1.
    pub fn tokens_per_vtime(&self) -> f64 {
        self.tokens as f64 / (self.batch_size as f64 * self.vtime)
    }

    pub fn sequence_rounds(&self) -> u64 {
        self.rounds * self.batch_size as u64
    }

    pub fn hits(&self) -> u64 {
        self.hits_after_primary + self.hits_after_backup
    }

    pub fn hit_rate(&self) -> f64 {
        self.hits() as f64 / self.sequence_rounds() as f64
    }

    pub fn hit_rates(&self) -> EmpiricalHitRates {
        let rate = |h: u64, n: u64| (n > 0).then(|| h as f64 / n as f64);
        EmpiricalHitRates {
            p_hit_p: rate(self.hits_after_primary, self.rounds_after_primary),
            p_hit_b: rate(self.hits_after_backup, self.rounds_after_backup),
            overall: rate(self.hits(), self.sequence_rounds()),
            rounds_after_primary: self.rounds_after_primary,
            rounds_after_backup: self.rounds_after_backup,
        }
    }

    /// Mean tokens per round from primary-origin speculations.
    pub fn e_hit(&self) -> Option<f64> {
        (self.rounds_after_primary > 0)
            .then(|| self.tokens_after_primary as f64 / self.rounds_after_primary as f64)
    }

    /// Mean tokens per round from backup-origin speculations.
    pub fn e_miss(&self) -> Option<f64> {
        (self.rounds_after_backup > 0)
            .then(|| self.tokens_after_backup as f64 / self.rounds_after_backup as f64)
    }

    pub fn tokens_per_round(&self) -> f64 {
        self.tokens as f64 / self.sequence_rounds() as f64
    }

    pub fn mean_accepted(&self) -> f64 {
        self.accepted_total as f64 / self.sequence_rounds() as f64
    }

    pub(crate) fn record_round(
        &mut self,
        seq: usize,
        origin: Origin,
        accepted: usize,
        emitted: &[usize],
        hit: bool,
        record: bool,
    ) {
        let n = emitted.len() as u64;
        self.tokens += n;
        self.accepted_total += accepted as u64;
        match origin {
            Origin::Primary => {
                self.rounds_after_primary += 1;
                self.tokens_after_primary += n;
                self.hits_after_primary += u64::from(hit);
            }
            Origin::Backup => {
                self.rounds_after_backup += 1;
                self.tokens_after_backup += n;
                self.hits_after_backup += u64::from(hit);
            }
        }
        if record {
            self.hit_log.push(RoundRecord {
                prev_origin: origin,
                hit,
            });
            self.streams[seq].extend_from_slice(emitted);
        }
    }
}

/// Sample `n` tokens from the target chain, one verification unit each.
pub fn run_ar(lm_target: &SyntheticLm, context: &[usize], n: u64, seed: u64) -> RunStats {
    let (mut rng, _) = sequence_rngs(seed, 0);
    let mut ctx = context.to_vec();
    let mut stats = RunStats::new(Mode::Ar, 1);
    for _ in 0..n {
        let t = sample(lm_target.probs_after(&ctx, &[]), &mut rng);
        push_context(&mut ctx, &[t]);
        stats.streams[0].push(t);
    }
    stats.rounds = n;
    stats.tokens = n;
    stats.vtime = n as f64;
    stats.rounds_after_primary = n;
    stats.tokens_after_primary = n;
    stats
}

/// Plain speculative decoding: draft K, verify, repeat. Each round costs
/// `1 + T_p`.
pub fn run_sd(cfg: &SimConfig) -> Result<RunStats, SimError> {
    cfg.validate()?;
    let b = cfg.batch_size;
    let mut stats = RunStats::new(Mode::Sd, b);
    let mut seqs: Vec<_> = (0..b)
        .map(|i| {
            let (v, d) = sequence_rngs(cfg.seed, i);
            (cfg.initial_context.clone(), v, d)
        })
        .collect();
    for _ in 0..cfg.rounds {
        for (i, (ctx, vrng, drng)) in seqs.iter_mut().enumerate() {
            let spec = draft(&cfg.pair.draft, ctx, cfg.k, &cfg.scheme, drng)?;
            let res = verify_with_rule(&cfg.pair.target, ctx, &spec, cfg.verify_rule, vrng)?;
            stats.record_round(
                i,
                Origin::Primary,
                res.outcome.accepted,
                &res.emitted,
                false,
                cfg.record,
            );
            push_context(ctx, &res.emitted);
        }
        stats.rounds += 1;
        stats.vtime += 1.0 + cfg.timing.t_p;
    }
    Ok(stats)
}

pub fn run_ssd(cfg: &SimConfig) -> Result<RunStats, SimError> {
    if cfg.batch_size != 1 {
        return Err(SimError::InvalidConfig(format!(
            "run_ssd is single-sequence; got batch_size {}",
            cfg.batch_size
        )));
    }
    run_ssd_batch(cfg)
}

/// SSD over `b` independent sequences sharing one round clock.
pub fn run_ssd_batch(cfg: &SimConfig) -> Result<RunStats, SimError> {
    cfg.validate()?;
    let mut verifier = VerifierSide::new(cfg);
    let mut drafter = DraftSide::new(cfg)?;
    let mut stats = RunStats::new(Mode::Ssd, cfg.batch_size);
    for _ in 0..cfg.rounds {
        drafter.build_caches()?;
        let specs = drafter.speculations();
        let results = verifier.verify_round(&specs)?;
        let outcomes: Vec<_> = results.iter().map(|r| r.outcome).collect();
        let hits = drafter.absorb(&outcomes)?;
        for (i, (res, &hit)) in results.iter().zip(&hits).enumerate() {
            stats.record_round(
                i,
                specs[i].origin(),
                res.outcome.accepted,
                &res.emitted,
                hit,
                cfg.record,
            );
        }
        let all_hit = hits.iter().all(|&h| h);
        stats.all_hit_rounds += u64::from(all_hit);
        stats.rounds += 1;
        stats.vtime += round_latency(&cfg.timing, all_hit);
    }
    Ok(stats)
}

pub fn round_latency(timing: &TimingParams, all_hit: bool) -> f64 {
    if all_hit {
        timing.hit_latency()
    } else {
        timing.miss_latency()
    }
}
