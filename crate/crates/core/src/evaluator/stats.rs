//! Inter-rater reliability and paired significance tests.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{MiveError, Result};

/// Krippendorff's alpha with the ordinal metric.
///
/// `ratings[r][i]` is rater `r`'s score for item `i`; `None` is missing.
/// Items with fewer than two ratings are not pairable and are dropped.
pub fn krippendorff_alpha(ratings: &[Vec<Option<f64>>]) -> Result<f64> {
    if ratings.len() < 2 {
        return Err(MiveError::invalid("alpha needs at least two raters"));
    }
    let items = ratings[0].len();
    if ratings.iter().any(|r| r.len() != items) {
        return Err(MiveError::shape("raters have different item counts"));
    }
    let units: Vec<Vec<f64>> = (0..items)
        .map(|i| ratings.iter().filter_map(|r| r[i]).collect::<Vec<_>>())
        .filter(|u| u.len() >= 2)
        .collect();
    if units.is_empty() {
        return Err(MiveError::Degenerate("no item has two or more ratings".into()));
    }
    if units.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MiveError::invalid("ratings must be finite"));
    }
    let mut values: Vec<f64> = units.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let k = values.len();
    let index = |v: f64| values.partition_point(|&x| x < v);

    let mut coincidence = vec![vec![0.0; k]; k];
    for u in &units {
        let w = 1.0 / (u.len() - 1) as f64;
        for (a, &x) in u.iter().enumerate() {
            for (b, &y) in u.iter().enumerate() {
                if a != b {
                    coincidence[index(x)][index(y)] += w;
                }
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let delta = ordinal_distances(&marginals);

    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for e in 0..k {
            observed += coincidence[c][e] * delta[c][e];
            expected += marginals[c] * marginals[e] * delta[c][e];
        }
    }
    if expected == 0.0 {
        return Err(MiveError::Degenerate("ratings show no variation".into()));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Squared ordinal distances from the value marginals.
fn ordinal_distances(marginals: &[f64]) -> Vec<Vec<f64>> {
    let k = marginals.len();
    let mut d = vec![vec![0.0; k]; k];
    for c in 0..k {
        for e in c + 1..k {
            let between: f64 = marginals[c..=e].iter().sum::<f64>() - (marginals[c] + marginals[e]) / 2.0;
            d[c][e] = between * between;
            d[e][c] = d[c][e];
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of ranks of the positive differences `x - y`.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

pub const EXACT_MAX_N: usize = 25;

/// Averaged ranks of `|d|`, 1-based.
pub fn signed_ranks(d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired signed-rank test of `x` against `y`.
///
/// Exact null distribution (conditional on tied ranks) for up to 25 nonzero
/// pairs, otherwise the tie-corrected normal approximation with continuity
/// correction.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() || x.is_empty() {
        return Err(MiveError::invalid(format!(
            "paired samples need equal nonzero lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(MiveError::invalid("paired samples must be finite"));
    }
    if d.is_empty() {
        return Err(MiveError::Degenerate("no nonzero pairs".into()));
    }
    let ranks = signed_ranks(&d);
    let w = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).fold(0.0, |acc, (_, r)| acc + r);
    let n = d.len();
    if n <= EXACT_MAX_N {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let obs = (2.0 * w).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=obs].iter().sum();
        let upper: f64 = counts[obs..].iter().sum();
        let p = (2.0 * lower.min(upper) / all).min(1.0);
        return Ok(Wilcoxon { statistic: w, p_value: p, n, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(Wilcoxon { statistic: w, p_value: p, n, exact: false })
}
