//! The two halves of an SSD deployment. The verifier only ever sees
//! speculations; caches live entirely on the draft side.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{push_context, sequence_rngs, BackupKind, SimConfig, SimError};
use crate::cache::{build_cache, FanOutPlan, SpeculationCache};
use crate::dist::{Categorical, SamplingScheme};
use crate::lm::LmPair;
use crate::specdec::{
    draft, verify_with_rule, Origin, RoundResult, Speculation, VerificationOutcome, VerifyRule,
};

pub struct VerifierSide {
    pair: Arc<LmPair>,
    rule: VerifyRule,
    contexts: Vec<Vec<usize>>,
    lengths: Vec<u64>,
    rngs: Vec<ChaCha8Rng>,
}

impl VerifierSide {
    pub fn new(cfg: &SimConfig) -> Self {
        let b = cfg.batch_size;
        Self {
            pair: cfg.pair.clone(),
            rule: cfg.verify_rule,
            contexts: vec![cfg.initial_context.clone(); b],
            lengths: vec![cfg.initial_context.len() as u64; b],
            rngs: (0..b).map(|i| sequence_rngs(cfg.seed, i).0).collect(),
        }
    }

    /// Verify one speculation per sequence and extend each sequence.
    pub fn verify_round(&mut self, specs: &[Speculation]) -> Result<Vec<RoundResult>, SimError> {
        if specs.len() != self.contexts.len() {
            return Err(SimError::ProtocolViolation(format!(
                "{} speculations for {} sequences",
                specs.len(),
                self.contexts.len()
            )));
        }
        let mut out = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let res = verify_with_rule(
                &self.pair.target,
                &self.contexts[i],
                spec,
                self.rule,
                &mut self.rngs[i],
            )?;
            push_context(&mut self.contexts[i], &res.emitted);
            self.lengths[i] += res.emitted.len() as u64;
            out.push(res);
        }
        Ok(out)
    }

    pub fn lengths(&self) -> &[u64] {
        &self.lengths
    }
}

pub struct DraftSide {
    pair: Arc<LmPair>,
    k: usize,
    scheme: SamplingScheme,
    primary_plan: FanOutPlan,
    backup_plan: FanOutPlan,
    backup_kind: BackupKind,
    contexts: Vec<Vec<usize>>,
    lengths: Vec<u64>,
    rngs: Vec<ChaCha8Rng>,
    specs: Vec<Speculation>,
    caches: Vec<SpeculationCache>,
}

impl DraftSide {
    /// Drafts the first speculation for every sequence (part of prefill,
    /// not charged to the clock).
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        let b = cfg.batch_size;
        let mut rngs: Vec<ChaCha8Rng> = (0..b).map(|i| sequence_rngs(cfg.seed, i).1).collect();
        let mut specs = Vec::with_capacity(b);
        for rng in rngs.iter_mut() {
            specs.push(draft(
                &cfg.pair.draft,
                &cfg.initial_context,
                cfg.k,
                &cfg.scheme,
                rng,
            )?);
        }
        Ok(Self {
            pair: cfg.pair.clone(),
            k: cfg.k,
            scheme: cfg.scheme,
            primary_plan: cfg.primary_plan.clone(),
            backup_plan: cfg.backup_plan.clone(),
            backup_kind: cfg.backup_kind,
            contexts: vec![cfg.initial_context.clone(); b],
            lengths: vec![cfg.initial_context.len() as u64; b],
            rngs,
            specs,
            caches: (0..b)
                .map(|_| SpeculationCache::empty(Origin::Primary))
                .collect(),
        })
    }

    /// Speculations currently out for verification.
    pub fn speculations(&self) -> Vec<Speculation> {
        self.specs.clone()
    }

    /// Pre-speculate for every likely outcome of the pending speculations,
    /// using the plan for each speculation's origin.
    pub fn build_caches(&mut self) -> Result<(), SimError> {
        for i in 0..self.specs.len() {
            let spec = &self.specs[i];
            let plan = match spec.origin() {
                Origin::Primary => &self.primary_plan,
                Origin::Backup => &self.backup_plan,
            };
            self.caches[i] = build_cache(
                &self.pair.draft,
                &self.contexts[i],
                spec,
                plan,
                &self.scheme,
                self.k,
                &mut self.rngs[i],
            )?;
        }
        Ok(())
    }

    /// Take the verifier's outcomes, extend contexts, and pick the next
    /// speculation per sequence. Returns the hit bitmap.
    pub fn absorb(&mut self, outcomes: &[VerificationOutcome]) -> Result<Vec<bool>, SimError> {
        if outcomes.len() != self.specs.len() {
            return Err(SimError::ProtocolViolation(format!(
                "{} outcomes for {} sequences",
                outcomes.len(),
                self.specs.len()
            )));
        }
        let mut hits = Vec::with_capacity(outcomes.len());
        for (i, outcome) in outcomes.iter().enumerate() {
            let spec = &self.specs[i];
            if outcome.accepted > spec.lookahead() {
                return Err(SimError::ProtocolViolation(format!(
                    "outcome accepts {} of {} tokens",
                    outcome.accepted,
                    spec.lookahead()
                )));
            }
            let mut emitted = spec.tokens()[..outcome.accepted].to_vec();
            emitted.push(outcome.bonus);
            push_context(&mut self.contexts[i], &emitted);
            self.lengths[i] += emitted.len() as u64;
            let next = match self.caches[i].take(outcome) {
                Some(s) => {
                    hits.push(true);
                    s
                }
                None => {
                    hits.push(false);
                    self.backup(i)?
                }
            };
            self.specs[i] = next;
        }
        Ok(hits)
    }

    fn backup(&mut self, seq: usize) -> Result<Speculation, SimError> {
        let rng = &mut self.rngs[seq];
        let spec = match self.backup_kind {
            BackupKind::SamePrimaryJit => draft(
                &self.pair.draft,
                &self.contexts[seq],
                self.k,
                &self.scheme,
                rng,
            )?,
            BackupKind::FastRandom => {
                let v = self.pair.vocab();
                let tokens = (0..self.k).map(|_| rng.random_range(0..v)).collect();
                Speculation::new(
                    tokens,
                    vec![Categorical::uniform(v); self.k],
                    Origin::Backup,
                )?
            }
        };
        Ok(spec.with_origin(Origin::Backup))
    }

    pub fn lengths(&self) -> &[u64] {
        &self.lengths
    }
}
