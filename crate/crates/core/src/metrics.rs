//! Area under the ROC curve with strict-inequality pair counting, and its
//! Hanley–McNeil 95% confidence interval.
//!
//! A tied (normal, anomalous) pair counts as 0, not 0.5. Most AUC libraries
//! award half credit for ties, so results differ from them whenever scores
//! collide.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub auc: f64,
    /// Number of normal clips, `N₋`.
    pub n_normal: usize,
    /// Number of anomalous clips, `N₊`.
    pub n_anomalous: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl EvalOutcome {
    pub fn from_scores(normal: &[f64], anomalous: &[f64]) -> Result<Self> {
        let a = auc(normal, anomalous)?;
        let (ci_low, ci_high) = auc_ci(a, normal.len(), anomalous.len());
        Ok(Self {
            auc: a,
            n_normal: normal.len(),
            n_anomalous: anomalous.len(),
            ci_low,
            ci_high,
        })
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

fn check_scores(normal: &[f64], anomalous: &[f64]) -> Result<()> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::contract(format!(
            "auc needs both classes, got {} normal and {} anomalous scores",
            normal.len(),
            anomalous.len()
        )));
    }
    if normal.iter().chain(anomalous).any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN anomaly score".into()));
    }
    Ok(())
}

/// Reference pairwise AUC: the fraction of (normal, anomalous) pairs whose
/// anomalous score is strictly larger.
pub fn auc(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    check_scores(normal, anomalous)?;
    let mut wins: u64 = 0;
    for &n in normal {
        for &a in anomalous {
            if a - n > 0.0 {
                wins += 1;
            }
        }
    }
    Ok(wins as f64 / (normal.len() as f64 * anomalous.len() as f64))
}

/// `O((N₋ + N₊) log N₋)` AUC, identical to [`auc`] including ties.
pub fn auc_sorted(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    check_scores(normal, anomalous)?;
    let mut sorted = normal.to_vec();
    sorted.sort_by(f64::total_cmp);
    let wins: u64 = anomalous
        .iter()
        .map(|&a| sorted.partition_point(|&n| a - n > 0.0) as u64)
        .sum();
    Ok(wins as f64 / (normal.len() as f64 * anomalous.len() as f64))
}

/// Hanley–McNeil standard error of an AUC estimate.
pub fn hanley_mcneil_se(auc: f64, n_normal: usize, n_anomalous: usize) -> f64 {
    let a = auc;
    let q1 = a / (2.0 - a);
    let q2 = 2.0 * a * a / (1.0 + a);
    let (nn, na) = (n_normal as f64, n_anomalous as f64);
    let var = (a * (1.0 - a) + (na - 1.0) * (q1 - a * a) + (nn - 1.0) * (q2 - a * a)) / (nn * na);
    var.max(0.0).sqrt()
}

/// `auc ± 1.96·SE`, clamped to `[0, 1]`.
pub fn auc_ci(auc: f64, n_normal: usize, n_anomalous: usize) -> (f64, f64) {
    let half = Z_95 * hanley_mcneil_se(auc, n_normal.max(1), n_anomalous.max(1));
    ((auc - half).max(0.0), (auc + half).min(1.0))
}

/// Mean of per-ID AUCs, the second of the two aggregates reported next to
/// the pooled AUC.
pub fn mean_auc(outcomes: &[EvalOutcome]) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    Some(outcomes.iter().map(|o| o.auc).sum::<f64>() / outcomes.len() as f64)
}
