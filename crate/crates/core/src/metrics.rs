//! Binary classification metrics: confusion counts, TPR/FPR, ROC, AUC and
//! accuracy.
//!
//! Label `1` is the positive class. A sample is predicted positive when its
//! score is `>= threshold`, so ties go positive.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC trace from `(0, 0)` to `(1, 1)`, one point per distinct threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    /// Threshold producing each point; the first entry is `+inf`.
    pub thresholds: Vec<f64>,
    // Raw counts behind each point, kept for an exact trapezoid.
    counts: Vec<(u64, u64)>,
    positives: u64,
    negatives: u64,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        // Twice the area in units of one positive-negative pair.
        let mut twice: u128 = 0;
        for w in self.counts.windows(2) {
            let (fp0, tp0) = w[0];
            let (fp1, tp1) = w[1];
            twice += (fp1 - fp0) as u128 * (tp0 + tp1) as u128;
        }
        twice as f64 / (2.0 * self.positives as f64 * self.negatives as f64)
    }
}

/// Scores and labels for a whole evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when only one class is present.
    pub auc_roc: Option<f64>,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
    pub curve: Option<RocCurve>,
    pub n_samples: usize,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let counts = confusion(scores, labels, DEFAULT_THRESHOLD)?;
        let curve = match roc_curve(scores, labels) {
            Ok(c) => Some(c),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            auc_roc: curve.as_ref().map(RocCurve::area),
            accuracy: (counts.tp + counts.tn) as f64 / scores.len() as f64,
            counts,
            curve,
            n_samples: scores.len(),
        })
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty { op: "metrics" });
    }
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(Error::InvalidLabel {
            index,
            value: value as f64,
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `(TPR, FPR)`; a zero denominator gives 0.
pub fn tpr_fpr(c: &ConfusionCounts) -> (f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fn_), ratio(c.fp, c.fp + c.tn))
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut counts = Vec::with_capacity(scores.len() + 1);
    let mut thresholds = Vec::with_capacity(scores.len() + 1);
    counts.push((0, 0));
    thresholds.push(f64::INFINITY);
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        counts.push((fp, tp));
        thresholds.push(t);
    }
    let points = counts
        .iter()
        .map(|&(fp, tp)| RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        })
        .collect();
    Ok(RocCurve {
        points,
        thresholds,
        counts,
        positives,
        negatives,
    })
}

/// Area under the ROC curve; equals the Mann–Whitney U statistic over
/// `#pos · #neg` with ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.area())
}

pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let c = confusion(scores, labels, threshold)?;
    Ok((c.tp + c.tn) as f64 / scores.len() as f64)
}
