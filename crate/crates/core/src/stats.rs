//! Two-sample tests on token streams from order-`m` Markov sources.
//!
//! Both streams are reduced to transition counts per context. Conditional on
//! the context, each next token is a fresh draw, so a chi-square homogeneity
//! test per context row (summed over rows) checks whether the two streams
//! come from the same conditionals.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Cells with expected count below this are pooled.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoSampleResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Total variation between the two empirical transition tables, averaged
    /// over contexts with weights from the pooled counts.
    pub tv: f64,
}

fn context_of(window: &[usize], vocab: usize) -> usize {
    window.iter().fold(0, |acc, &t| acc * vocab + t)
}

/// `counts[ctx * V + next]` for every token of `stream`, with `prefix`
/// supplying (left-padded) context for the first tokens.
pub fn transition_counts(
    vocab: usize,
    order: usize,
    prefix: &[usize],
    stream: &[usize],
) -> Vec<u64> {
    let mut counts = vec![0u64; vocab.pow(order as u32) * vocab];
    let mut full = vec![0usize; order];
    full.extend_from_slice(prefix);
    let offset = full.len();
    full.extend_from_slice(stream);
    for pos in offset..full.len() {
        let ctx = context_of(&full[pos - order..pos], vocab);
        counts[ctx * vocab + full[pos]] += 1;
    }
    counts
}

/// Chi-square homogeneity of next-token counts, summed over context rows.
pub fn transition_homogeneity(
    vocab: usize,
    order: usize,
    prefix: &[usize],
    a: &[usize],
    b: &[usize],
) -> TwoSampleResult {
    let ca = transition_counts(vocab, order, prefix, a);
    let cb = transition_counts(vocab, order, prefix, b);
    homogeneity_from_counts(vocab, &ca, &cb)
}

pub fn homogeneity_from_counts(vocab: usize, ca: &[u64], cb: &[u64]) -> TwoSampleResult {
    assert_eq!(ca.len(), cb.len(), "count tables differ in shape");
    let mut statistic = 0.0;
    let mut dof = 0;
    let mut tv_sum = 0.0;
    let mut weight_sum = 0.0;
    for (ra, rb) in ca.chunks(vocab).zip(cb.chunks(vocab)) {
        let na: u64 = ra.iter().sum();
        let nb: u64 = rb.iter().sum();
        if na == 0 || nb == 0 {
            continue;
        }
        let tv: f64 = 0.5
            * ra.iter()
                .zip(rb)
                .map(|(&x, &y)| (x as f64 / na as f64 - y as f64 / nb as f64).abs())
                .sum::<f64>();
        let w = (na + nb) as f64;
        tv_sum += w * tv;
        weight_sum += w;
        let (s, d) = row_statistic(ra, rb, na, nb);
        statistic += s;
        dof += d;
    }
    let p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64)
            .expect("positive degrees of freedom")
            .sf(statistic)
    };
    TwoSampleResult {
        statistic,
        dof,
        p_value,
        tv: if weight_sum > 0.0 {
            tv_sum / weight_sum
        } else {
            0.0
        },
    }
}

fn row_statistic(ra: &[u64], rb: &[u64], na: u64, nb: u64) -> (f64, usize) {
    let n = (na + nb) as f64;
    let small = na.min(nb) as f64 / n;
    let mut cells: Vec<(u64, u64)> = Vec::new();
    let mut pooled = (0u64, 0u64);
    for (&x, &y) in ra.iter().zip(rb) {
        if (x + y) as f64 * small < MIN_EXPECTED {
            pooled.0 += x;
            pooled.1 += y;
        } else {
            cells.push((x, y));
        }
    }
    if pooled.0 + pooled.1 > 0 {
        if (pooled.0 + pooled.1) as f64 * small >= MIN_EXPECTED || cells.is_empty() {
            cells.push(pooled);
        } else {
            let smallest = (0..cells.len())
                .min_by_key(|&i| cells[i].0 + cells[i].1)
                .expect("nonempty");
            cells[smallest].0 += pooled.0;
            cells[smallest].1 += pooled.1;
        }
    }
    if cells.len() < 2 {
        return (0.0, 0);
    }
    let mut s = 0.0;
    for (x, y) in &cells {
        let col = (x + y) as f64;
        let ea = col * na as f64 / n;
        let eb = col * nb as f64 / n;
        s += (*x as f64 - ea).powi(2) / ea + (*y as f64 - eb).powi(2) / eb;
    }
    (s, cells.len() - 1)
}
