//! Categorical distributions, sampling schemes and acceptance-rate algebra.
//!
//! Everything here is a pure function of its inputs. Randomness is always
//! passed in explicitly so callers control stream layout.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used when checking probability invariants.
pub const PROB_TOL: f64 = 1e-12;

/// Logit used to represent a zero-probability entry when converting
/// probabilities back to logits. `exp` of it underflows to exactly 0.
pub const ZERO_PROB_LOGIT: f64 = -1.0e4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("every weight is zero")]
    AllZero,
    #[error("residual distribution has zero positive mass")]
    DegenerateResidual,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("invalid sampling scheme: {0}")]
    InvalidScheme(String),
}

/// A probability vector over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates nonnegativity and unit mass (within [`PROB_TOL`]).
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        if probs.is_empty() {
            return Err(DistError::InvalidProbs("empty vector".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(DistError::InvalidProbs(format!(
                "entry {i} is {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(DistError::InvalidProbs(format!("sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab: usize) -> Self {
        assert!(vocab > 0, "uniform over an empty vocabulary");
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn one_hot(vocab: usize, index: usize) -> Self {
        assert!(index < vocab, "one-hot index out of range");
        let mut probs = vec![0.0; vocab];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl<'de> Deserialize<'de> for Categorical {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            probs: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        Categorical::new(raw.probs).map_err(serde::de::Error::custom)
    }
}

/// Unnormalized log-weights over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self, DistError> {
        if values.is_empty() {
            return Err(DistError::InvalidProbs("empty logit vector".into()));
        }
        if let Some(i) = values.iter().position(|z| !z.is_finite()) {
            return Err(DistError::NonFiniteLogit(i));
        }
        Ok(Self(values))
    }

    /// `ln p`, with zero entries mapped to [`ZERO_PROB_LOGIT`].
    pub fn from_probs(p: &[f64]) -> Result<Self, DistError> {
        Self::new(
            p.iter()
                .map(|&x| {
                    if x > 0.0 {
                        x.ln().max(ZERO_PROB_LOGIT)
                    } else {
                        ZERO_PROB_LOGIT
                    }
                })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for Logits {
    type Error = DistError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Logits::new(values)
    }
}

impl From<Logits> for Vec<f64> {
    fn from(z: Logits) -> Self {
        z.0
    }
}

/// Map from logits to a draft distribution.
///
/// `Saguaro` multiplies the weight of the `fanout` highest-logit tokens by
/// `downweight` before normalizing. Temperature is applied to the logits
/// first, so the scheme acts on `z / temperature`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingScheme {
    Standard {
        temperature: f64,
    },
    Saguaro {
        fanout: usize,
        downweight: f64,
        temperature: f64,
    },
}

impl Default for SamplingScheme {
    fn default() -> Self {
        SamplingScheme::Standard { temperature: 1.0 }
    }
}

impl SamplingScheme {
    pub fn temperature(&self) -> f64 {
        match *self {
            SamplingScheme::Standard { temperature } => temperature,
            SamplingScheme::Saguaro { temperature, .. } => temperature,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<(), DistError> {
        let t = self.temperature();
        if !(t.is_finite() && t > 0.0) {
            return Err(DistError::InvalidScheme(format!(
                "temperature must be positive, got {t}"
            )));
        }
        if let SamplingScheme::Saguaro {
            fanout, downweight, ..
        } = *self
        {
            if fanout == 0 || fanout > vocab {
                return Err(DistError::InvalidScheme(format!(
                    "fanout {fanout} outside 1..={vocab}"
                )));
            }
            if !(0.0..=1.0).contains(&downweight) {
                return Err(DistError::InvalidScheme(format!(
                    "downweight {downweight} outside [0, 1]"
                )));
            }
            if downweight == 0.0 && fanout == vocab {
                return Err(DistError::InvalidScheme(
                    "downweight 0 over the whole vocabulary leaves no mass".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Indices of the `f` largest values; ties go to the lower index.
pub fn top_f(values: &[f64], f: usize) -> Vec<usize> {
    top_f_excluding(values, f, None)
}

/// Like [`top_f`] but never returns `exclude`.
pub fn top_f_excluding(values: &[f64], f: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| Some(i) != exclude).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(f);
    idx
}

/// Rescale nonnegative weights to unit mass.
pub fn normalize(weights: &[f64]) -> Result<Categorical, DistError> {
    if weights.is_empty() {
        return Err(DistError::InvalidProbs("empty vector".into()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(DistError::InvalidProbs(format!(
            "weight {i} is {}",
            weights[i]
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(DistError::AllZero);
    }
    Ok(Categorical {
        probs: weights.iter().map(|w| w / total).collect(),
    })
}

/// Softmax of `z / temperature`.
pub fn softmax(z: &Logits, temperature: f64) -> Categorical {
    let weights = tempered_weights(z.values(), temperature);
    normalize(&weights).expect("max-shifted exponentials contain a 1")
}

fn tempered_weights(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    z.iter().map(|&v| ((v - max) / temperature).exp()).collect()
}

/// Apply a sampling scheme to logits.
pub fn apply_scheme(z: &Logits, scheme: &SamplingScheme) -> Result<Categorical, DistError> {
    scheme.validate(z.len())?;
    match *scheme {
        SamplingScheme::Standard { temperature } => Ok(softmax(z, temperature)),
        SamplingScheme::Saguaro {
            fanout,
            downweight,
            temperature,
        } => {
            let mut weights = tempered_weights(z.values(), temperature);
            for t in top_f(z.values(), fanout) {
                weights[t] *= downweight;
            }
            normalize(&weights)
        }
    }
}

/// Normalized positive part of `p_target - p_draft`.
pub fn residual(p_target: &Categorical, p_draft: &Categorical) -> Result<Categorical, DistError> {
    check_lengths(p_target, p_draft)?;
    let positive: Vec<f64> = p_target
        .probs
        .iter()
        .zip(&p_draft.probs)
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    match normalize(&positive) {
        Err(DistError::AllZero) => Err(DistError::DegenerateResidual),
        other => other,
    }
}

/// `sum_x min(p_target(x), p_draft(x))`.
///
/// The total-variation form `1 - |p_target - p_draft|_1 / 2` is computed as
/// well and must agree.
pub fn acceptance_rate(p_target: &Categorical, p_draft: &Categorical) -> Result<f64, DistError> {
    check_lengths(p_target, p_draft)?;
    let min_sum: f64 = p_target
        .probs
        .iter()
        .zip(&p_draft.probs)
        .map(|(t, d)| t.min(*d))
        .sum();
    let tv_form = 1.0 - 0.5 * l1_distance(p_target, p_draft)?;
    debug_assert!(
        (min_sum - tv_form).abs() <= 4.0 * PROB_TOL,
        "acceptance forms disagree: {min_sum} vs {tv_form}"
    );
    Ok(min_sum.clamp(0.0, 1.0))
}

pub fn l1_distance(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    check_lengths(p, q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

pub fn total_variation(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    Ok(0.5 * l1_distance(p, q)?)
}

/// Draw one token by inverse CDF using a single uniform variate.
pub fn sample<R: Rng + ?Sized>(p: &Categorical, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.probs.iter().enumerate() {
        if pi > 0.0 {
            cumulative += pi;
            last_positive = i;
            if u < cumulative {
                return i;
            }
        }
    }
    // rounding left the cumulative sum a hair below u
    last_positive
}

fn check_lengths(a: &Categorical, b: &Categorical) -> Result<(), DistError> {
    if a.len() != b.len() {
        return Err(DistError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}
