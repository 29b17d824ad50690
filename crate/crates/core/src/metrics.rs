//! Confusion-matrix statistics, ROC/AUC, and Youden-optimal thresholding.
//!
//! A prediction is positive iff its score is `>=` the threshold. The ROC
//! curve sweeps every distinct score (ties grouped into one step) plus
//! sentinel thresholds at plus and minus infinity; AUC is the trapezoidal
//! area under that curve. The Youden index J = TPR - FPR is maximized over
//! the distinct-score thresholds, ties broken toward the larger threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("score {0} is not a probability in [0, 1]")]
    InvalidScore(f64),
    #[error("label {0} is not binary")]
    InvalidLabel(u8),
    #[error("ROC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
}

/// Prediction scores paired with ground-truth binary labels.
#[derive(Clone, Debug)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricsError::Empty);
        }
        for &s in &scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(MetricsError::InvalidScore(s));
            }
        }
        for &l in &labels {
            if l > 1 {
                return Err(MetricsError::InvalidLabel(l));
            }
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn require_both_classes(&self) -> Result<(usize, usize), MetricsError> {
        let p = self.positives();
        let n = self.negatives();
        if p == 0 || n == 0 {
            return Err(MetricsError::SingleClass {
                positives: p,
                negatives: n,
            });
        }
        Ok((p, n))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Rates derived from confusion counts: recall = TP/(TP+FN),
/// precision = TP/(TP+FP), FPR = FP/(TN+FP), F1 = harmonic mean of
/// precision and recall. Precision is 0 when nothing is predicted positive;
/// F1 is 0 when precision + recall is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub recall: f64,
    pub precision: f64,
    pub fpr: f64,
    pub f1: f64,
}

/// Counts at `threshold`: positive prediction iff `score >= threshold`.
pub fn confusion_at(data: &ScoredLabels, threshold: f64) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (&score, &label) in data.scores.iter().zip(&data.labels) {
        let predicted_positive = score >= threshold;
        match (predicted_positive, label == 1) {
            (true, true) => counts.true_positives += 1,
            (true, false) => counts.false_positives += 1,
            (false, false) => counts.true_negatives += 1,
            (false, true) => counts.false_negatives += 1,
        }
    }
    counts
}

pub fn rates(counts: &ConfusionCounts) -> Rates {
    let tp = counts.true_positives as f64;
    let fp = counts.false_positives as f64;
    let tn = counts.true_negatives as f64;
    let fn_ = counts.false_negatives as f64;
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let fpr = if tn + fp > 0.0 { fp / (tn + fp) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Rates {
        recall,
        precision,
        fpr,
        f1,
    }
}

/// ROC curve points in sweep order (threshold decreasing).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// (FPR, TPR) pairs, starting at (0, 0) and ending at (1, 1).
    pub points: Vec<(f64, f64)>,
    /// Matching thresholds, starting at +inf and ending at -inf.
    pub thresholds: Vec<f64>,
}

/// Cumulative (threshold, TP, FP) per distinct score, descending.
fn threshold_sweep(data: &ScoredLabels) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| {
        data.scores[b]
            .partial_cmp(&data.scores[a])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    let mut sweep: Vec<(f64, usize, usize)> = Vec::new();
    let mut tp = 0;
    let mut fp = 0;
    for &i in &order {
        if data.labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        match sweep.last_mut() {
            Some(last) if last.0 == data.scores[i] => {
                last.1 = tp;
                last.2 = fp;
            }
            _ => sweep.push((data.scores[i], tp, fp)),
        }
    }
    sweep
}

/// ROC curve and trapezoidal AUC. Errors on single-class data.
pub fn roc_auc(data: &ScoredLabels) -> Result<(RocCurve, f64), MetricsError> {
    let (p, n) = data.require_both_classes()?;
    let sweep = threshold_sweep(data);

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    for &(threshold, tp, fp) in &sweep {
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        thresholds.push(threshold);
    }
    points.push((1.0, 1.0));
    thresholds.push(f64::NEG_INFINITY);

    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok((RocCurve { points, thresholds }, auc))
}

/// Evaluation summary at the Youden-optimal threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub youden_threshold: f64,
    pub j: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Scan the distinct-score thresholds, maximize J = TPR - FPR (ties toward
/// the larger threshold), and report the operating-point metrics there.
pub fn youden_optimal(data: &ScoredLabels) -> Result<EvalReport, MetricsError> {
    let (p, n) = data.require_both_classes()?;
    let sweep = threshold_sweep(data);

    let mut best_threshold = sweep[0].0;
    let mut best_j = f64::NEG_INFINITY;
    for &(threshold, tp, fp) in &sweep {
        let j = tp as f64 / p as f64 - fp as f64 / n as f64;
        if j > best_j {
            best_j = j;
            best_threshold = threshold;
        }
    }

    let (_, auc) = roc_auc(data)?;
    let counts = confusion_at(data, best_threshold);
    let r = rates(&counts);
    Ok(EvalReport {
        auc,
        youden_threshold: best_threshold,
        j: r.recall - r.fpr,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
        tp: counts.true_positives,
        fp: counts.false_positives,
        tn: counts.true_negatives,
        fn_: counts.false_negatives,
    })
}
