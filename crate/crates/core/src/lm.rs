//! Synthetic context-conditioned language models.
//!
//! A [`SyntheticLm`] is a dense order-`m` Markov table: every length-`m`
//! context over a vocabulary of `V` tokens owns one row of logits. Contexts
//! are indexed in lexicographic order, most significant token first.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{acceptance_rate, softmax, Categorical, DistError, Logits};

pub const MAX_VOCAB: usize = 1024;
pub const MAX_ORDER: usize = 2;
/// Upper bound on `V^(m+1)`, the number of stored logits.
pub const MAX_TABLE_ENTRIES: usize = 1 << 25;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("alpha goal {goal} unreachable; attainable range is [{min}, {max}]")]
    Unreachable { goal: f64, min: f64, max: f64 },
    #[error("models are incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLm {
    vocab: usize,
    order: usize,
    seed: u64,
    logits: Vec<Logits>,
    probs: Vec<Categorical>,
}

/// On-disk layout: `{"v":..,"m":..,"seed":..,"rows":[[logit,...],...]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LmFile {
    v: usize,
    m: usize,
    seed: u64,
    rows: Vec<Vec<f64>>,
}

fn check_shape(vocab: usize, order: usize) -> Result<usize, LmError> {
    if !(2..=MAX_VOCAB).contains(&vocab) {
        return Err(LmError::InvalidParams(format!(
            "vocab {vocab} outside 2..={MAX_VOCAB}"
        )));
    }
    if order > MAX_ORDER {
        return Err(LmError::InvalidParams(format!(
            "order {order} above {MAX_ORDER}"
        )));
    }
    let contexts = vocab.pow(order as u32);
    if contexts * vocab > MAX_TABLE_ENTRIES {
        return Err(LmError::InvalidParams(format!(
            "table of {contexts} x {vocab} logits is too large"
        )));
    }
    Ok(contexts)
}

impl SyntheticLm {
    /// Build from explicit logit rows in lexicographic context order.
    pub fn from_rows(
        vocab: usize,
        order: usize,
        seed: u64,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, LmError> {
        let contexts = check_shape(vocab, order)?;
        if rows.len() != contexts {
            return Err(LmError::InvalidParams(format!(
                "expected {contexts} rows, got {}",
                rows.len()
            )));
        }
        let mut logits = Vec::with_capacity(contexts);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != vocab {
                return Err(LmError::InvalidParams(format!(
                    "row {i} has {} entries, expected {vocab}",
                    row.len()
                )));
            }
            logits.push(Logits::new(row)?);
        }
        Ok(Self::from_logits(vocab, order, seed, logits))
    }

    fn from_logits(vocab: usize, order: usize, seed: u64, logits: Vec<Logits>) -> Self {
        let probs = logits.iter().map(|z| softmax(z, 1.0)).collect();
        Self {
            vocab,
            order,
            seed,
            logits,
            probs,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len()
    }

    /// Row index for the last `m` tokens of `history ++ extra`.
    ///
    /// Histories shorter than `m` are left-padded with token 0.
    pub fn context_index(&self, history: &[usize], extra: &[usize]) -> usize {
        let m = self.order;
        let total = history.len() + extra.len();
        let mut idx = 0;
        for pos in (total as isize - m as isize)..total as isize {
            let tok = if pos < 0 {
                0
            } else if (pos as usize) < history.len() {
                history[pos as usize]
            } else {
                extra[pos as usize - history.len()]
            };
            debug_assert!(tok < self.vocab, "token {tok} outside vocabulary");
            idx = idx * self.vocab + tok;
        }
        idx
    }

    pub fn row_logits(&self, context: usize) -> &Logits {
        &self.logits[context]
    }

    /// Softmax of the row at temperature 1.
    pub fn row_probs(&self, context: usize) -> &Categorical {
        &self.probs[context]
    }

    pub fn logits_after(&self, history: &[usize], extra: &[usize]) -> &Logits {
        &self.logits[self.context_index(history, extra)]
    }

    pub fn probs_after(&self, history: &[usize], extra: &[usize]) -> &Categorical {
        &self.probs[self.context_index(history, extra)]
    }

    pub fn to_json(&self) -> Result<String, LmError> {
        let file = LmFile {
            v: self.vocab,
            m: self.order,
            seed: self.seed,
            rows: self.logits.iter().map(|z| z.values().to_vec()).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self, LmError> {
        let file: LmFile = serde_json::from_str(s)?;
        Self::from_rows(file.v, file.m, file.seed, file.rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn dirichlet_row(gamma: &Gamma<f64>, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Draw every context row from a symmetric Dirichlet(`concentration`).
pub fn make_lm(
    vocab: usize,
    order: usize,
    concentration: f64,
    seed: u64,
) -> Result<SyntheticLm, LmError> {
    let contexts = check_shape(vocab, order)?;
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(LmError::InvalidParams(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let gamma =
        Gamma::new(concentration, 1.0).map_err(|e| LmError::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Vec::with_capacity(contexts);
    for _ in 0..contexts {
        let row = dirichlet_row(&gamma, vocab, &mut rng);
        logits.push(Logits::from_probs(&row)?);
    }
    Ok(SyntheticLm::from_logits(vocab, order, seed, logits))
}

/// Mix each target row with independent Dirichlet(1) noise:
/// `p_draft = (1 - epsilon) * p_target + epsilon * q`.
pub fn derive_draft(
    target: &SyntheticLm,
    epsilon: f64,
    noise_seed: u64,
) -> Result<SyntheticLm, LmError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(LmError::InvalidParams(format!(
            "epsilon {epsilon} outside [0, 1]"
        )));
    }
    if epsilon == 0.0 {
        return Ok(SyntheticLm {
            seed: noise_seed,
            ..target.clone()
        });
    }
    let mut logits = Vec::with_capacity(target.num_contexts());
    for (ctx, q) in noise_rows(target, noise_seed).into_iter().enumerate() {
        let pt = target.row_probs(ctx).probs();
        let mixed: Vec<f64> = pt
            .iter()
            .zip(&q)
            .map(|(t, n)| (1.0 - epsilon) * t + epsilon * n)
            .collect();
        logits.push(Logits::from_probs(&mixed)?);
    }
    Ok(SyntheticLm::from_logits(
        target.vocab,
        target.order,
        noise_seed,
        logits,
    ))
}

fn noise_rows(target: &SyntheticLm, noise_seed: u64) -> Vec<Vec<f64>> {
    let gamma = Gamma::new(1.0, 1.0).expect("unit gamma");
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    (0..target.num_contexts())
        .map(|_| dirichlet_row(&gamma, target.vocab, &mut rng))
        .collect()
}

/// Acceptance rate averaged uniformly over contexts.
pub fn mean_acceptance(target: &SyntheticLm, draft: &SyntheticLm) -> Result<f64, LmError> {
    if target.vocab != draft.vocab || target.order != draft.order {
        return Err(LmError::Incompatible(format!(
            "target (V={}, m={}) vs draft (V={}, m={})",
            target.vocab, target.order, draft.vocab, draft.order
        )));
    }
    let mut total = 0.0;
    for ctx in 0..target.num_contexts() {
        total += acceptance_rate(target.row_probs(ctx), draft.row_probs(ctx))?;
    }
    Ok(total / target.num_contexts() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmPair {
    pub target: SyntheticLm,
    pub draft: SyntheticLm,
    pub nominal_alpha: f64,
    /// Mixture weight that produced the draft.
    pub epsilon: f64,
}

impl LmPair {
    pub fn new(target: SyntheticLm, draft: SyntheticLm) -> Result<Self, LmError> {
        let nominal_alpha = mean_acceptance(&target, &draft)?;
        Ok(Self {
            target,
            draft,
            nominal_alpha,
            epsilon: f64::NAN,
        })
    }

    pub fn vocab(&self) -> usize {
        self.target.vocab
    }

    pub fn measured_alpha(&self) -> f64 {
        mean_acceptance(&self.target, &self.draft).expect("pair shapes checked at construction")
    }
}

pub const CALIBRATION_TOL: f64 = 0.02;
const MAX_BISECTION_STEPS: usize = 40;

/// Choose the mixture weight so the mean acceptance rate hits `alpha_goal`.
pub fn calibrate_pair(target: &SyntheticLm, alpha_goal: f64, seed: u64) -> Result<LmPair, LmError> {
    if !(alpha_goal > 0.0 && alpha_goal < 1.0) {
        return Err(LmError::InvalidParams(format!(
            "alpha goal {alpha_goal} outside (0, 1)"
        )));
    }
    let noise = noise_rows(target, seed);
    // The mixture makes p_t - p_d = eps * (p_t - q), so alpha(eps) is affine
    // per context; bisection still only needs monotonicity.
    let alpha_at = |eps: f64| -> f64 {
        let mut total = 0.0;
        for (ctx, q) in noise.iter().enumerate() {
            let pt = target.row_probs(ctx).probs();
            let tv: f64 = pt
                .iter()
                .zip(q)
                .map(|(t, n)| (eps * (t - n)).abs())
                .sum::<f64>()
                * 0.5;
            total += 1.0 - tv;
        }
        total / noise.len() as f64
    };
    let (hi_alpha, lo_alpha) = (alpha_at(0.0), alpha_at(1.0));
    if alpha_goal < lo_alpha - CALIBRATION_TOL || alpha_goal > hi_alpha {
        return Err(LmError::Unreachable {
            goal: alpha_goal,
            min: lo_alpha,
            max: hi_alpha,
        });
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if alpha_at(mid) > alpha_goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let epsilon = 0.5 * (lo + hi);
    let draft = derive_draft(target, epsilon, seed)?;
    let measured = mean_acceptance(target, &draft)?;
    if (measured - alpha_goal).abs() > CALIBRATION_TOL {
        return Err(LmError::Unreachable {
            goal: alpha_goal,
            min: lo_alpha,
            max: hi_alpha,
        });
    }
    Ok(LmPair {
        target: target.clone(),
        draft,
        nominal_alpha: alpha_goal,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::total_variation;

    #[test]
    fn rows_are_normalized() {
        let lm = make_lm(8, 1, 1.0, 7).unwrap();
        assert_eq!(lm.num_contexts(), 8);
        for ctx in 0..8 {
            let s: f64 = lm.row_probs(ctx).probs().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn make_lm_is_deterministic() {
        let a = make_lm(6, 2, 0.5, 11).unwrap();
        let b = make_lm(6, 2, 0.5, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_lm(6, 2, 0.5, 12).unwrap());
    }

    #[test]
    fn large_concentration_is_near_uniform() {
        let lm = make_lm(10, 1, 1e6, 3).unwrap();
        let u = Categorical::uniform(10);
        for ctx in 0..lm.num_contexts() {
            assert!(total_variation(lm.row_probs(ctx), &u).unwrap() < 0.01);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(make_lm(1, 1, 1.0, 0).is_err());
        assert!(make_lm(4, 3, 1.0, 0).is_err());
        assert!(make_lm(4, 1, 0.0, 0).is_err());
        assert!(make_lm(1024, 2, 1.0, 0).is_err());
    }

    #[test]
    fn context_index_is_lexicographic() {
        let lm = make_lm(5, 2, 1.0, 0).unwrap();
        assert_eq!(lm.context_index(&[3, 1, 4], &[]), 4 + 5);
        assert_eq!(lm.context_index(&[3], &[2]), 3 * 5 + 2);
        assert_eq!(lm.context_index(&[], &[2]), 2);
        assert_eq!(lm.context_index(&[], &[]), 0);
        let lm0 = make_lm(5, 0, 1.0, 0).unwrap();
        assert_eq!(lm0.context_index(&[1, 2, 3], &[4]), 0);
    }

    #[test]
    fn draft_endpoints() {
        let target = make_lm(6, 1, 1.0, 5).unwrap();
        let same = derive_draft(&target, 0.0, 9).unwrap();
        for ctx in 0..6 {
            let a = acceptance_rate(target.row_probs(ctx), same.row_probs(ctx)).unwrap();
            assert!((a - 1.0).abs() < 1e-12);
        }
        // eps = 1 rows depend on the noise seed only
        let other_target = make_lm(6, 1, 1.0, 6).unwrap();
        let a = derive_draft(&target, 1.0, 9).unwrap();
        let b = derive_draft(&other_target, 1.0, 9).unwrap();
        for ctx in 0..6 {
            let pa = a.row_probs(ctx).probs();
            let pb = b.row_probs(ctx).probs();
            for (x, y) in pa.iter().zip(pb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn acceptance_lower_bound_from_mixture() {
        let target = make_lm(12, 2, 0.7, 1).unwrap();
        for (i, eps) in [0.05, 0.3, 0.6, 0.95].into_iter().enumerate() {
            let draft = derive_draft(&target, eps, 100 + i as u64).unwrap();
            for ctx in 0..100 {
                let a = acceptance_rate(target.row_probs(ctx), draft.row_probs(ctx)).unwrap();
                assert!(a >= 1.0 - eps - 1e-12, "ctx {ctx}: {a} < 1 - {eps}");
            }
        }
    }

    #[test]
    fn calibration_hits_goal() {
        let target = make_lm(16, 1, 0.5, 21).unwrap();
        for goal in [0.6, 0.8, 0.9, 0.98] {
            let pair = calibrate_pair(&target, goal, 4).unwrap();
            assert!((pair.measured_alpha() - goal).abs() < CALIBRATION_TOL);
        }
        let near_one = calibrate_pair(&target, 0.999, 4).unwrap();
        assert!(near_one.epsilon < 0.01);
        assert!(matches!(
            calibrate_pair(&target, 0.01, 4),
            Err(LmError::Unreachable { .. })
        ));
    }

    #[test]
    fn alpha_nonincreasing_in_epsilon() {
        let target = make_lm(10, 1, 1.0, 8).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let eps = i as f64 / 19.0;
            let a = mean_acceptance(&target, &derive_draft(&target, eps, 77).unwrap()).unwrap();
            assert!(a <= prev + 1e-12);
            prev = a;
        }
    }

    #[test]
    fn json_roundtrip() {
        let lm = make_lm(4, 1, 1.0, 2).unwrap();
        let s = lm.to_json().unwrap();
        assert!(s.starts_with("{\"v\":4,\"m\":1,\"seed\":2,\"rows\":[["));
        assert_eq!(SyntheticLm::from_json(&s).unwrap(), lm);
        assert!(SyntheticLm::from_json(r#"{"v":2,"m":0,"seed":0,"rows":[[0.0]]}"#).is_err());
        assert!(SyntheticLm::from_json(r#"{"v":2,"m":0,"seed":0,"rows":[[0,0]],"x":1}"#).is_err());
    }
}
