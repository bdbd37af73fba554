//! AUROC and DeLong's test for two correlated AUROCs, both computed from
//! midranks in `O(n log n)`.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Outcome of a paired DeLong comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    /// Two-sided p-value under the normal approximation. The approximation
    /// is rough below about 30 samples.
    pub p_value: f64,
}

/// Per-sample DeLong components for one score set.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralComponents {
    /// One entry per positive: the fraction of negatives it outscores, ties
    /// counted half.
    pub v10: Vec<f64>,
    /// One entry per negative: the fraction of positives that outscore it.
    pub v01: Vec<f64>,
}

impl StructuralComponents {
    pub fn auc(&self) -> f64 {
        mean(&self.v10)
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// 1-based ranks with tied values sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney estimate of `P(score_pos > score_neg)`, ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

pub fn structural_components(scores: &[f64], labels: &[bool]) -> Result<StructuralComponents> {
    let (pos, neg) = check(scores, labels)?;
    let positives: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let negatives: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let all: Vec<f64> = positives.iter().chain(&negatives).copied().collect();
    let (tx, ty, tz) = (midranks(&positives), midranks(&negatives), midranks(&all));
    let v10 = (0..pos).map(|i| (tz[i] - tx[i]) / neg as f64).collect();
    let v01 = (0..neg).map(|j| 1.0 - (tz[pos + j] - ty[j]) / pos as f64).collect();
    Ok(StructuralComponents { v10, v01 })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample covariance with an `n − 1` denominator; zero for a single sample.
fn covariance(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// Paired test of `H₀: AUC_a = AUC_b` for two score sets on the same labels.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    let ca = structural_components(scores_a, labels)?;
    let cb = structural_components(scores_b, labels)?;
    let (auc_a, auc_b) = (ca.auc(), cb.auc());
    let (m, n) = (ca.v10.len() as f64, ca.v01.len() as f64);
    let var = |x: &StructuralComponents, y: &StructuralComponents| {
        covariance(&x.v10, &y.v10) / m + covariance(&x.v01, &y.v01) / n
    };
    let diff_var = var(&ca, &ca) + var(&cb, &cb) - 2.0 * var(&ca, &cb);
    if !(diff_var > 0.0) {
        return Err(Error::DegenerateTest { auc_a, auc_b });
    }
    let z = (auc_a - auc_b) / diff_var.sqrt();
    let p_value = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(DelongResult {
        auc_a,
        auc_b,
        z,
        p_value,
    })
}
