//! Quality-score statistics and the Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::metrics::MetricsError;

/// Counts of accepted messages per quality score 1..=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QualityDistribution {
    pub counts: [u64; 4],
}

impl QualityDistribution {
    pub fn new(counts: [u64; 4]) -> Self {
        Self { counts }
    }

    pub fn accepted_count(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Frequency-weighted mean and population standard deviation.
pub fn quality_stats(dist: &QualityDistribution) -> Result<(f64, f64), MetricsError> {
    let n = dist.accepted_count();
    if n == 0 {
        return Err(MetricsError::EmptyDistribution);
    }
    let n = n as f64;
    let scores = (1..=4).map(f64::from);
    let mean = scores.clone().zip(dist.counts).map(|(s, c)| s * c as f64).sum::<f64>() / n;
    let var = scores
        .zip(dist.counts)
        .map(|(s, c)| c as f64 * (s - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `Σ sgn(b − a) · rank`.
    pub w: f64,
    /// Two-sided.
    pub p_value: f64,
    /// Pairs with a non-zero difference.
    pub n_nonzero: usize,
    pub method: WilcoxonMethod,
}

/// Largest non-zero count for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 12;

/// Ranks of `|d|` with ties averaged, doubled so they stay integral.
fn doubled_ranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i..=j share rank ((i+1) + (j+1)) / 2; doubled: i + j + 2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

struct Signed {
    /// Doubled ranks of the non-zero differences.
    ranks: Vec<u64>,
    /// Doubled W.
    w2: i64,
}

fn signed_ranks(pairs: &[(f64, f64)]) -> Signed {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    let ranks = doubled_ranks(&diffs);
    let w2 = diffs
        .iter()
        .zip(&ranks)
        .map(|(d, r)| if *d > 0.0 { *r as i64 } else { -(*r as i64) })
        .sum();
    Signed { ranks, w2 }
}

/// Exact two-sided p: the share of the 2^n sign assignments whose |W| is at
/// least the observed |W|, counted by subset-sum over doubled ranks.
fn exact_p(ranks: &[u64], w2: i64) -> f64 {
    let total: u64 = ranks.iter().sum();
    // ways[s] = number of subsets (positive-signed ranks) with doubled sum s.
    let mut ways = vec![0u64; total as usize + 1];
    ways[0] = 1;
    for &r in ranks {
        for s in (r as usize..=total as usize).rev() {
            ways[s] += ways[s - r as usize];
        }
    }
    let threshold = w2.unsigned_abs();
    let extreme: u64 = ways
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i64 - total as i64).unsigned_abs() >= threshold)
        .map(|(_, c)| *c)
        .sum();
    extreme as f64 / (1u64 << ranks.len()) as f64
}

/// Normal approximation: Var(W) = Σ rank², continuity correction of 1.
fn normal_p(ranks: &[u64], w2: i64) -> f64 {
    let var: f64 = ranks.iter().map(|&r| (r as f64 / 2.0).powi(2)).sum();
    let w = (w2 as f64 / 2.0).abs();
    let z = ((w - 1.0).max(0.0)) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

fn result(s: &Signed, method: WilcoxonMethod) -> WilcoxonResult {
    let n = s.ranks.len();
    let p_value = match method {
        WilcoxonMethod::Degenerate => 1.0,
        WilcoxonMethod::Exact => exact_p(&s.ranks, s.w2),
        WilcoxonMethod::NormalApproximation => normal_p(&s.ranks, s.w2),
    };
    WilcoxonResult {
        w: s.w2 as f64 / 2.0,
        p_value,
        n_nonzero: n,
        method,
    }
}

/// Paired signed-rank test on `(a, b)` with differences `b − a`. Exact for
/// up to [`EXACT_LIMIT`] non-zero differences, normal approximation above.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let s = signed_ranks(pairs);
    let method = match s.ranks.len() {
        0 => WilcoxonMethod::Degenerate,
        n if n <= EXACT_LIMIT => WilcoxonMethod::Exact,
        _ => WilcoxonMethod::NormalApproximation,
    };
    Ok(result(&s, method))
}

/// Forces one p-value route regardless of sample size.
pub fn wilcoxon_with(pairs: &[(f64, f64)], method: WilcoxonMethod) -> Result<WilcoxonResult, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let s = signed_ranks(pairs);
    if s.ranks.is_empty() {
        return Ok(result(&s, WilcoxonMethod::Degenerate));
    }
    Ok(result(&s, method))
}
