//! Classification metrics and the exact paired signed-rank test.

use serde::Serialize;

use crate::error::{Error, Result};

/// Percent of predictions equal to their labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Area under the ROC curve in percent, with label 1 as the positive class.
///
/// Computed from midranks, so tied scores contribute one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("roc_auc expects binary labels, got {l}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc needs both classes present".into()));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(100.0 * u / (pos * neg) as f64)
}

/// 1-based ranks with ties sharing their average rank. Values compare exactly.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignedRankTest {
    /// Nonzero differences that entered the test.
    pub n: usize,
    /// Sum of ranks of positive differences `a − b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `P(W+ ≥ observed)`, evidence that `a` exceeds `b`.
    pub p_greater: f64,
    /// `P(W+ ≤ observed)`.
    pub p_less: f64,
    pub p_two_sided: f64,
}

/// Largest number of nonzero differences the exact null distribution is
/// computed for.
pub const MAX_SIGNED_RANK_N: usize = 60;

/// Exact Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped and tied magnitudes receive midranks. The
/// null distribution of `W+` is built by counting all `2^n` sign
/// assignments (as a subset-sum table over doubled ranks, which keeps
/// midranks integral). The two-sided p-value is twice the smaller tail,
/// capped at 1.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<SignedRankTest> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 5 {
        return Err(Error::Contract(format!("signed-rank test needs at least 5 pairs, got {}", a.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let nonzero: Vec<f64> = diffs.into_iter().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    let n = nonzero.len();
    if n > MAX_SIGNED_RANK_N {
        return Err(Error::Contract(format!(
            "exact signed-rank test supports at most {MAX_SIGNED_RANK_N} nonzero pairs, got {n}"
        )));
    }
    let magnitudes: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let doubled: Vec<usize> = midranks(&magnitudes).iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = doubled.iter().zip(&nonzero).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let total: usize = doubled.iter().sum();

    // counts[s] = number of sign assignments whose doubled W+ equals s.
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(n as i32);
    let upper: u64 = counts[observed..].iter().sum();
    let lower: u64 = counts[..=observed].iter().sum();
    let p_greater = upper as f64 / all;
    let p_less = lower as f64 / all;
    Ok(SignedRankTest {
        n,
        w_plus: observed as f64 / 2.0,
        w_minus: (total - observed) as f64 / 2.0,
        p_greater,
        p_less,
        p_two_sided: (2.0 * p_greater.min(p_less)).min(1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("mean of an empty set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}
