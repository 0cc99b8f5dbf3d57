//! Lossless speculative decoding: drafting, verification, and exact
//! enumeration of a single round's output law.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{
    apply_scheme, residual, sample, Categorical, DistError, SamplingScheme, PROB_TOL,
};
use crate::lm::SyntheticLm;

pub const EXACT_MAX_VOCAB: usize = 32;
pub const EXACT_MAX_K: usize = 3;
pub const EXACT_MAX_ORDER: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("speculation is malformed: {0}")]
    Malformed(String),
    #[error("lookahead must be at least 1")]
    ZeroLookahead,
    #[error("enumeration too large: {0}")]
    TooLarge(String),
    #[error("models are incompatible: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Primary,
    Backup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speculation {
    tokens: Vec<usize>,
    draft_dists: Vec<Categorical>,
    origin: Origin,
}

impl Speculation {
    pub fn new(
        tokens: Vec<usize>,
        draft_dists: Vec<Categorical>,
        origin: Origin,
    ) -> Result<Self, SpecError> {
        if tokens.is_empty() {
            return Err(SpecError::ZeroLookahead);
        }
        if tokens.len() != draft_dists.len() {
            return Err(SpecError::Malformed(format!(
                "{} tokens but {} distributions",
                tokens.len(),
                draft_dists.len()
            )));
        }
        for (i, (&t, d)) in tokens.iter().zip(&draft_dists).enumerate() {
            if t >= d.len() {
                return Err(SpecError::Malformed(format!(
                    "token {t} at position {i} outside vocabulary of {}",
                    d.len()
                )));
            }
            if d.prob(t) <= 0.0 {
                return Err(SpecError::Malformed(format!(
                    "token {t} at position {i} has zero draft probability"
                )));
            }
        }
        Ok(Self {
            tokens,
            draft_dists,
            origin,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn draft_dists(&self) -> &[Categorical] {
        &self.draft_dists
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn lookahead(&self) -> usize {
        self.tokens.len()
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }
}

/// Accepted-prefix length and bonus token. This is the cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub accepted: usize,
    pub bonus: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundResult {
    pub outcome: VerificationOutcome,
    /// Accepted prefix followed by the bonus token.
    pub emitted: Vec<usize>,
}

/// How the bonus token is drawn after a rejection.
///
/// `BonusFromTarget` is intentionally wrong: it ignores the draft and samples
/// the bonus from the target, which biases the output. It exists as a negative
/// control for the losslessness checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyRule {
    #[default]
    Lossless,
    BonusFromTarget,
}

/// Draft `k` tokens autoregressively from `context`.
pub fn draft<R: Rng + ?Sized>(
    lm_draft: &SyntheticLm,
    context: &[usize],
    k: usize,
    scheme: &SamplingScheme,
    rng: &mut R,
) -> Result<Speculation, SpecError> {
    if k == 0 {
        return Err(SpecError::ZeroLookahead);
    }
    let mut tokens = Vec::with_capacity(k);
    let mut dists = Vec::with_capacity(k);
    for _ in 0..k {
        let pd = apply_scheme(lm_draft.logits_after(context, &tokens), scheme)?;
        tokens.push(sample(&pd, rng));
        dists.push(pd);
    }
    Ok(Speculation {
        tokens,
        draft_dists: dists,
        origin: Origin::Primary,
    })
}

pub fn verify<R: Rng + ?Sized>(
    lm_target: &SyntheticLm,
    context: &[usize],
    spec: &Speculation,
    rng: &mut R,
) -> Result<RoundResult, SpecError> {
    verify_with_rule(lm_target, context, spec, VerifyRule::Lossless, rng)
}

/// One verification pass. Randomness is consumed as one accept coin per
/// examined position, then one bonus draw.
pub fn verify_with_rule<R: Rng + ?Sized>(
    lm_target: &SyntheticLm,
    context: &[usize],
    spec: &Speculation,
    rule: VerifyRule,
    rng: &mut R,
) -> Result<RoundResult, SpecError> {
    let k_max = spec.lookahead();
    for i in 0..k_max {
        let x = spec.tokens[i];
        let pd = &spec.draft_dists[i];
        let pt = lm_target.probs_after(context, &spec.tokens[..i]);
        if pd.len() != pt.len() {
            return Err(DistError::LengthMismatch(pt.len(), pd.len()).into());
        }
        let qd = pd.prob(x);
        assert!(qd > 0.0, "drafted token has zero draft probability");
        let u: f64 = rng.random();
        if u * qd < pt.prob(x) {
            continue;
        }
        let bonus = match rule {
            VerifyRule::Lossless => sample(&residual(pt, pd)?, rng),
            VerifyRule::BonusFromTarget => sample(pt, rng),
        };
        return Ok(finish(&spec.tokens[..i], bonus));
    }
    let pt = lm_target.probs_after(context, &spec.tokens);
    let bonus = sample(pt, rng);
    Ok(finish(&spec.tokens, bonus))
}

fn finish(prefix: &[usize], bonus: usize) -> RoundResult {
    let mut emitted = Vec::with_capacity(prefix.len() + 1);
    emitted.extend_from_slice(prefix);
    emitted.push(bonus);
    RoundResult {
        outcome: VerificationOutcome {
            accepted: prefix.len(),
            bonus,
        },
        emitted,
    }
}

/// `(1 - alpha^(K+1)) / (1 - alpha)`, the mean number of tokens per round.
pub fn expected_tokens(alpha: f64, k: usize) -> f64 {
    assert!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0, 1]");
    if alpha >= 1.0 {
        return (k + 1) as f64;
    }
    (1.0 - alpha.powi(k as i32 + 1)) / (1.0 - alpha)
}

fn check_exact_bounds(
    lm_target: &SyntheticLm,
    lm_draft: &SyntheticLm,
    k: usize,
) -> Result<(), SpecError> {
    if lm_target.vocab() != lm_draft.vocab() {
        return Err(SpecError::Incompatible(format!(
            "vocab {} vs {}",
            lm_target.vocab(),
            lm_draft.vocab()
        )));
    }
    if k == 0 {
        return Err(SpecError::ZeroLookahead);
    }
    let order = lm_target.order().max(lm_draft.order());
    if lm_target.vocab() > EXACT_MAX_VOCAB || k > EXACT_MAX_K || order > EXACT_MAX_ORDER {
        return Err(SpecError::TooLarge(format!(
            "V={}, K={k}, m={order}; limits are V<={EXACT_MAX_VOCAB}, K<={EXACT_MAX_K}, m<={EXACT_MAX_ORDER}",
            lm_target.vocab()
        )));
    }
    Ok(())
}

pub type EmittedLaw = BTreeMap<Vec<usize>, f64>;

pub fn exact_round_distribution(
    lm_target: &SyntheticLm,
    lm_draft: &SyntheticLm,
    context: &[usize],
    k: usize,
    scheme: &SamplingScheme,
) -> Result<EmittedLaw, SpecError> {
    exact_round_distribution_with_rule(
        lm_target,
        lm_draft,
        context,
        k,
        scheme,
        VerifyRule::Lossless,
    )
}

/// Exact probability of every emitted sequence of one round, summing over
/// draft paths, accept coins and bonus draws.
pub fn exact_round_distribution_with_rule(
    lm_target: &SyntheticLm,
    lm_draft: &SyntheticLm,
    context: &[usize],
    k: usize,
    scheme: &SamplingScheme,
    rule: VerifyRule,
) -> Result<EmittedLaw, SpecError> {
    check_exact_bounds(lm_target, lm_draft, k)?;
    scheme.validate(lm_target.vocab())?;
    let mut law = EmittedLaw::new();
    let mut prefix = Vec::with_capacity(k);
    enumerate(
        lm_target,
        lm_draft,
        context,
        k,
        scheme,
        rule,
        &mut prefix,
        1.0,
        &mut law,
    )?;
    Ok(law)
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    lm_target: &SyntheticLm,
    lm_draft: &SyntheticLm,
    context: &[usize],
    k: usize,
    scheme: &SamplingScheme,
    rule: VerifyRule,
    prefix: &mut Vec<usize>,
    weight: f64,
    law: &mut EmittedLaw,
) -> Result<(), SpecError> {
    let pt = lm_target.probs_after(context, prefix);
    if prefix.len() == k {
        for (b, &q) in pt.probs().iter().enumerate() {
            add_emission(law, prefix, b, weight * q);
        }
        return Ok(());
    }
    let pd = apply_scheme(lm_draft.logits_after(context, prefix), scheme)?;
    let mut reject_mass = 0.0;
    for (x, &qd) in pd.probs().iter().enumerate() {
        if qd <= 0.0 {
            continue;
        }
        let accept = (pt.prob(x) / qd).min(1.0);
        reject_mass += qd * (1.0 - accept);
        if accept > 0.0 {
            prefix.push(x);
            enumerate(
                lm_target,
                lm_draft,
                context,
                k,
                scheme,
                rule,
                prefix,
                weight * qd * accept,
                law,
            )?;
            prefix.pop();
        }
    }
    if reject_mass > 0.0 {
        let bonus_law = match rule {
            VerifyRule::Lossless => match residual(pt, &pd) {
                Ok(r) => r,
                // Float noise on a pair that is equal up to rounding.
                Err(DistError::DegenerateResidual) if reject_mass < PROB_TOL => return Ok(()),
                Err(e) => return Err(e.into()),
            },
            VerifyRule::BonusFromTarget => pt.clone(),
        };
        for (b, &q) in bonus_law.probs().iter().enumerate() {
            add_emission(law, prefix, b, weight * reject_mass * q);
        }
    }
    Ok(())
}

fn add_emission(law: &mut EmittedLaw, prefix: &[usize], bonus: usize, mass: f64) {
    if mass <= 0.0 {
        return;
    }
    let mut key = Vec::with_capacity(prefix.len() + 1);
    key.extend_from_slice(prefix);
    key.push(bonus);
    *law.entry(key).or_insert(0.0) += mass;
}

/// Probabilities of every length-`depth` continuation of `context`, in
/// base-V lexicographic order.
pub fn target_chain(lm: &SyntheticLm, context: &[usize], depth: usize) -> Vec<f64> {
    let v = lm.vocab();
    let mut out = vec![0.0; v.pow(depth as u32)];
    let mut path = Vec::with_capacity(depth);
    fill_chain(lm, context, depth, &mut path, 1.0, 0, &mut out);
    out
}

fn fill_chain(
    lm: &SyntheticLm,
    context: &[usize],
    depth: usize,
    path: &mut Vec<usize>,
    weight: f64,
    index: usize,
    out: &mut [f64],
) {
    if path.len() == depth {
        out[index] += weight;
        return;
    }
    let v = lm.vocab();
    let probs = lm.probs_after(context, path).probs().to_vec();
    for (x, q) in probs.into_iter().enumerate() {
        if q <= 0.0 {
            continue;
        }
        path.push(x);
        fill_chain(lm, context, depth, path, weight * q, index * v + x, out);
        path.pop();
    }
}

/// Largest total-variation distance, over prefix lengths `1..=K+1`, between
/// the token stream implied by one round (continued by the target once the
/// round's output runs out) and the target chain rule.
pub fn losslessness_gap(
    lm_target: &SyntheticLm,
    context: &[usize],
    law: &EmittedLaw,
    k: usize,
) -> f64 {
    let v = lm_target.vocab();
    let mut worst: f64 = 0.0;
    for j in 1..=k + 1 {
        let mut implied = vec![0.0; v.pow(j as u32)];
        for (emitted, &mass) in law {
            if emitted.len() >= j {
                let idx = emitted[..j].iter().fold(0, |acc, &t| acc * v + t);
                implied[idx] += mass;
            } else {
                let mut full = context.to_vec();
                full.extend_from_slice(emitted);
                let rest = j - emitted.len();
                let base = emitted.iter().fold(0, |acc, &t| acc * v + t) * v.pow(rest as u32);
                for (i, q) in target_chain(lm_target, &full, rest).into_iter().enumerate() {
                    implied[base + i] += mass * q;
                }
            }
        }
        let truth = target_chain(lm_target, context, j);
        let tv = 0.5
            * implied
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}
