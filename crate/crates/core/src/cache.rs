//! Speculation caches and fan-out planning.
//!
//! A cache maps predicted verification outcomes `(k, t*)` to speculations
//! drafted ahead of time. The fan-out plan `F_0..F_K` says how many bonus
//! tokens are guessed for each accepted-prefix length.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{
    apply_scheme, residual, top_f, top_f_excluding, Categorical, DistError, Logits, SamplingScheme,
};
use crate::lm::SyntheticLm;
use crate::specdec::{draft, Origin, SpecError, Speculation, VerificationOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("budget {budget} is below K+1 = {needed}")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("invalid fan-out parameters: {0}")]
    InvalidParams(String),
    #[error("plan for {plan:?} speculations used on a {spec:?} speculation")]
    RoleMismatch { plan: Origin, spec: Origin },
    #[error("plan covers K={plan} but the speculation has K={spec}")]
    LookaheadMismatch { plan: usize, spec: usize },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Integer fan-out per accepted-prefix length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanOutPlan {
    pub f: Vec<usize>,
    pub role: Origin,
    pub budget: usize,
}

impl FanOutPlan {
    pub fn new(f: Vec<usize>, role: Origin, budget: usize) -> Result<Self, CacheError> {
        let plan = Self { f, role, budget };
        plan.validate()?;
        Ok(plan)
    }

    /// Spread `budget` as evenly as possible, lower positions first.
    pub fn uniform(k: usize, budget: usize, role: Origin) -> Self {
        let n = k + 1;
        let f = (0..n)
            .map(|i| budget / n + usize::from(i < budget % n))
            .collect();
        Self { f, role, budget }
    }

    /// The same fan-out at every position, with budget equal to the total.
    pub fn constant(k: usize, fanout: usize, role: Origin) -> Self {
        Self {
            f: vec![fanout; k + 1],
            role,
            budget: fanout * (k + 1),
        }
    }

    pub fn lookahead(&self) -> usize {
        self.f.len() - 1
    }

    pub fn total(&self) -> usize {
        self.f.iter().sum()
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        if self.f.is_empty() {
            return Err(CacheError::InvalidParams("empty fan-out vector".into()));
        }
        if self.total() > self.budget {
            return Err(CacheError::InvalidParams(format!(
                "fan-out total {} exceeds budget {}",
                self.total(),
                self.budget
            )));
        }
        Ok(())
    }

    /// Positions `k < K` exclude the drafted token, so at most `V-1` guesses
    /// are meaningful there; position `K` allows `V`.
    pub fn validate_for_vocab(&self, vocab: usize) -> Result<(), CacheError> {
        self.validate()?;
        let k_max = self.lookahead();
        for (k, &f) in self.f.iter().enumerate() {
            let cap = if k < k_max { vocab - 1 } else { vocab };
            if f > cap {
                return Err(CacheError::InvalidParams(format!(
                    "F_{k} = {f} exceeds {cap} for vocabulary {vocab}"
                )));
            }
        }
        Ok(())
    }
}

fn check_ar(a: f64, r: f64) -> Result<(), CacheError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(CacheError::InvalidParams(format!("a = {a} outside (0, 1)")));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(CacheError::InvalidParams(format!(
            "r = {r} must be positive"
        )));
    }
    Ok(())
}

/// Probability that exactly `k` tokens are accepted (`k < K`) or all `K` are.
pub fn outcome_weights(a: f64, k_max: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k_max).map(|k| a.powi(k as i32) * (1.0 - a)).collect();
    w.push(a.powi(k_max as i32));
    w
}

/// `1 - F^-r` for `F >= 1`, and 0 for `F = 0`.
pub fn powerlaw_hit(f: f64, r: f64) -> f64 {
    if f <= 0.0 {
        0.0
    } else {
        1.0 - f.powf(-r)
    }
}

/// Hit rate of a plan when the previous speculation accepts each token with
/// probability `a` and the per-position hit rate follows the power law.
pub fn conditional_hit_rate(f: &[usize], a: f64, r: f64) -> f64 {
    let w = outcome_weights(a, f.len() - 1);
    w.iter()
        .zip(f)
        .map(|(wk, &fk)| wk * powerlaw_hit(fk as f64, r))
        .sum()
}

/// Continuous budget-constrained optimum:
/// `F_k = F_0 a^(k/(1+r))` for `k < K` and
/// `F_K = F_0 a^(K/(1+r)) (1-a)^(-1/(1+r))`.
pub fn geometric_fanout_continuous(
    a: f64,
    r: f64,
    k_max: usize,
    budget: f64,
) -> Result<Vec<f64>, CacheError> {
    check_ar(a, r)?;
    let e = 1.0 / (1.0 + r);
    let c = a.powf(e);
    let tail = a.powf(k_max as f64 * e) * (1.0 - a).powf(-e);
    let head = (1.0 - c.powi(k_max as i32)) / (1.0 - c);
    let f0 = budget / (tail + head);
    let mut f: Vec<f64> = (0..k_max).map(|k| f0 * c.powi(k as i32)).collect();
    f.push(f0 * tail);
    Ok(f)
}

/// Integer plan that sums to `budget`.
///
/// With `p(1) = 0` a position holding a single guess is wasted, so the best
/// integer plan may leave some positions empty. Candidate supports are the
/// prefixes `{0..j}` with or without position `K`. On each support the
/// continuous optimum is floored and the leftover budget is handed out by
/// largest marginal hit-rate gain. The best support wins, full support first
/// on ties.
pub fn geometric_fanout(
    a: f64,
    r: f64,
    k_max: usize,
    budget: usize,
    role: Origin,
) -> Result<FanOutPlan, CacheError> {
    check_ar(a, r)?;
    if budget < k_max + 1 {
        return Err(CacheError::BudgetTooSmall {
            budget,
            needed: k_max + 1,
        });
    }
    let w = outcome_weights(a, k_max);
    let mut supports: Vec<Vec<usize>> = vec![(0..=k_max).collect()];
    for j in (0..=k_max).rev() {
        if j < k_max {
            supports.push((0..j).chain(std::iter::once(k_max)).collect());
        }
        if j > 0 {
            supports.push((0..j).collect());
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for support in &supports {
        let f = round_on_support(&w, r, budget, support);
        let hit = conditional_hit_rate(&f, a, r);
        if best.as_ref().is_none_or(|(h, _)| hit > *h + 1e-15) {
            best = Some((hit, f));
        }
    }
    let (_, f) = best.expect("at least the full support is tried");
    Ok(FanOutPlan { f, role, budget })
}

fn round_on_support(w: &[f64], r: f64, budget: usize, support: &[usize]) -> Vec<usize> {
    let e = 1.0 / (1.0 + r);
    let shares: Vec<f64> = support.iter().map(|&k| w[k].powf(e)).collect();
    let total: f64 = shares.iter().sum();
    let mut exact = vec![0.0; w.len()];
    let mut f = vec![0usize; w.len()];
    for (&k, s) in support.iter().zip(&shares) {
        exact[k] = budget as f64 * s / total;
        f[k] = exact[k].floor() as usize;
    }
    let mut used: usize = f.iter().sum();
    while used < budget {
        // Largest marginal gain; equal gains fall back to largest remainder.
        let key = |k: usize| {
            let gain = w[k] * (powerlaw_hit(f[k] as f64 + 1.0, r) - powerlaw_hit(f[k] as f64, r));
            (gain, exact[k] - f[k] as f64)
        };
        let mut pick = support[0];
        for &k in &support[1..] {
            if key(k) > key(pick) {
                pick = k;
            }
        }
        f[pick] += 1;
        used += 1;
    }
    f
}

/// Largest relative violation of the first-order optimality conditions
/// `w_k p'(F_k) = w_0 p'(F_0)` with `p'(F) = r F^(-r-1)`.
pub fn lagrange_residual(plan: &[f64], a: f64, r: f64) -> f64 {
    assert!(
        plan.iter().all(|&f| f > 0.0),
        "continuous plan needs positive entries"
    );
    let k_max = plan.len() - 1;
    let deriv = |f: f64| r * f.powf(-r - 1.0);
    let g0 = deriv(plan[0]);
    let mut worst: f64 = 0.0;
    for (k, &f) in plan.iter().enumerate().skip(1) {
        let expected = if k < k_max {
            a.powi(-(k as i32)) * g0
        } else {
            (1.0 - a) * a.powi(-(k as i32)) * g0
        };
        worst = worst.max((deriv(f) / expected - 1.0).abs());
    }
    if k_max == 0 {
        return 0.0;
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeculationCache {
    entries: HashMap<VerificationOutcome, Speculation>,
    round_origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookup<'a> {
    Hit(&'a Speculation),
    Miss,
}

impl SpeculationCache {
    pub fn empty(round_origin: Origin) -> Self {
        Self {
            entries: HashMap::new(),
            round_origin,
        }
    }

    pub fn lookup(&self, outcome: &VerificationOutcome) -> Lookup<'_> {
        match self.entries.get(outcome) {
            Some(s) => Lookup::Hit(s),
            None => Lookup::Miss,
        }
    }

    pub fn take(&mut self, outcome: &VerificationOutcome) -> Option<Speculation> {
        self.entries.remove(outcome)
    }

    pub fn contains(&self, outcome: &VerificationOutcome) -> bool {
        self.entries.contains_key(outcome)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn round_origin(&self) -> Origin {
        self.round_origin
    }

    /// Keys in sorted order.
    pub fn keys(&self) -> Vec<VerificationOutcome> {
        let mut keys: Vec<_> = self.entries.keys().copied().collect();
        keys.sort();
        keys
    }
}

/// Predicted outcomes for a speculation, in `(k, rank)` order.
///
/// Position `k < K` guesses the top `F_k` draft logits after `s_1..s_k`,
/// skipping `s_{k+1}` since a rejected token is never the bonus. Position `K`
/// has no exclusion.
pub fn predicted_outcomes(
    lm_draft: &SyntheticLm,
    context: &[usize],
    spec: &Speculation,
    plan: &FanOutPlan,
) -> Result<Vec<VerificationOutcome>, CacheError> {
    let k_max = spec.lookahead();
    if plan.lookahead() != k_max {
        return Err(CacheError::LookaheadMismatch {
            plan: plan.lookahead(),
            spec: k_max,
        });
    }
    let tokens = spec.tokens();
    let mut out = Vec::with_capacity(plan.total());
    for (k, &fk) in plan.f.iter().enumerate() {
        if fk == 0 {
            continue;
        }
        let z = lm_draft.logits_after(context, &tokens[..k]);
        let exclude = (k < k_max).then(|| tokens[k]);
        for bonus in top_f_excluding(z.values(), fk, exclude) {
            out.push(VerificationOutcome { accepted: k, bonus });
        }
    }
    Ok(out)
}

/// Pre-draft a `k_next`-token speculation for every predicted outcome.
///
/// Each entry draws from its own ChaCha stream keyed by the entry index, so
/// the result does not depend on the order entries are filled.
pub fn build_cache<R: Rng + ?Sized>(
    lm_draft: &SyntheticLm,
    context: &[usize],
    spec: &Speculation,
    plan: &FanOutPlan,
    scheme: &SamplingScheme,
    k_next: usize,
    rng: &mut R,
) -> Result<SpeculationCache, CacheError> {
    if plan.role != spec.origin() {
        return Err(CacheError::RoleMismatch {
            plan: plan.role,
            spec: spec.origin(),
        });
    }
    let outcomes = predicted_outcomes(lm_draft, context, spec, plan)?;
    let base: u64 = rng.random();
    let mut entries = HashMap::with_capacity(outcomes.len());
    let mut extended = Vec::with_capacity(context.len() + spec.lookahead() + 1);
    for (idx, outcome) in outcomes.into_iter().enumerate() {
        let mut entry_rng = ChaCha8Rng::seed_from_u64(base);
        entry_rng.set_stream(idx as u64);
        extended.clear();
        extended.extend_from_slice(context);
        extended.extend_from_slice(&spec.tokens()[..outcome.accepted]);
        extended.push(outcome.bonus);
        let next = draft(lm_draft, &extended, k_next, scheme, &mut entry_rng)?;
        entries.insert(outcome, next);
    }
    Ok(SpeculationCache {
        entries,
        round_origin: spec.origin(),
    })
}

/// Probability that a bonus drawn from the residual of `p_target` against the
/// Saguaro-transformed draft lands in `top_F(z)`, ignoring exclusion.
///
/// Returns 1 when the residual has no mass.
pub fn residual_hit_probability(
    p_target: &Categorical,
    z: &Logits,
    fanout: usize,
    downweight: f64,
    temperature: f64,
) -> Result<f64, CacheError> {
    let scheme = SamplingScheme::Saguaro {
        fanout,
        downweight,
        temperature,
    };
    let pc = apply_scheme(z, &scheme)?;
    if pc.len() != p_target.len() {
        return Err(DistError::LengthMismatch(p_target.len(), pc.len()).into());
    }
    let mut cached = vec![false; z.len()];
    for t in top_f(z.values(), fanout) {
        cached[t] = true;
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for (t, (q, p)) in p_target.probs().iter().zip(pc.probs()).enumerate() {
        let u = (q - p).max(0.0);
        if cached[t] {
            inside += u;
        } else {
            outside += u;
        }
    }
    if inside + outside == 0.0 {
        return Ok(1.0);
    }
    Ok(inside / (inside + outside))
}

/// Exact single-position hit rate given a rejection: the drafted token `x`
/// is drawn from `scheme(z)`, rejected with probability `1 - min(1, p_t/p_d)`,
/// and the cache holds the top `fanout` raw logits other than `x`.
///
/// `None` when rejection is impossible.
pub fn rejection_hit_rate(
    p_target: &Categorical,
    z: &Logits,
    scheme: &SamplingScheme,
    fanout: usize,
) -> Result<Option<f64>, CacheError> {
    let pd = apply_scheme(z, scheme)?;
    let r = match residual(p_target, &pd) {
        Ok(r) => r,
        Err(DistError::DegenerateResidual) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let (mut reject, mut hit) = (0.0, 0.0);
    for (x, (&qd, &qt)) in pd.probs().iter().zip(p_target.probs()).enumerate() {
        let mass = (qd - qt).max(0.0);
        if mass <= 0.0 {
            continue;
        }
        reject += mass;
        let in_cache: f64 = top_f_excluding(z.values(), fanout, Some(x))
            .into_iter()
            .map(|b| r.prob(b))
            .sum();
        hit += mass * in_cache;
    }
    if reject == 0.0 {
        return Ok(None);
    }
    Ok(Some(hit / reject))
}
