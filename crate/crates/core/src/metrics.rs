//! Binary classification metrics with broken (=1) as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Row-normalized confusion rates in percent: TN%+FP% = 100 over the
    /// negative row, FN%+TP% = 100 over the positive row.
    pub tn_rate: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub tp_rate: f64,
}

impl Metrics {
    pub fn from_counts(tn: u64, fp: u64, fn_: u64, tp: u64) -> Metrics {
        let total = tn + fp + fn_ + tp;
        let accuracy = if total > 0 {
            (tp + tn) as f64 / total as f64
        } else {
            0.0
        };
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let neg_row = tn + fp;
        let pos_row = fn_ + tp;
        let (tn_rate, fp_rate) = if neg_row > 0 {
            (
                100.0 * tn as f64 / neg_row as f64,
                100.0 * fp as f64 / neg_row as f64,
            )
        } else {
            (0.0, 0.0)
        };
        let (fn_rate, tp_rate) = if pos_row > 0 {
            (
                100.0 * fn_ as f64 / pos_row as f64,
                100.0 * tp as f64 / pos_row as f64,
            )
        } else {
            (0.0, 0.0)
        };
        Metrics {
            tn,
            fp,
            fn_,
            tp,
            accuracy,
            precision,
            recall,
            f_score,
            tn_rate,
            fp_rate,
            fn_rate,
            tp_rate,
        }
    }
}

/// Confusion counts and derived metrics; labels and predictions in {0,1}.
pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "compute_metrics: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("compute_metrics: empty input".into()));
    }
    let (mut tn, mut fp, mut fn_, mut tp) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::Contract(
                "compute_metrics: labels must be in {0,1}".into(),
            ));
        }
        match (y, p) {
            (0, 0) => tn += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            (1, 1) => tp += 1,
            _ => unreachable!(),
        }
    }
    Ok(Metrics::from_counts(tn, fp, fn_, tp))
}

/// Broken-class F-score; 0 on degenerate inputs.
pub fn f_score_binary(predictions: &[usize], labels: &[usize]) -> f64 {
    compute_metrics(predictions, labels)
        .map(|m| m.f_score)
        .unwrap_or(0.0)
}

/// Arithmetic per-fold averages of every metric field (counts are summed so
/// the struct stays meaningful, but the derived fields are means of the
/// per-fold values, not recomputed from the pooled counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub folds: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tn_rate: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub tp_rate: f64,
}

pub fn average_metrics(per_fold: &[Metrics]) -> AveragedMetrics {
    let n = per_fold.len().max(1) as f64;
    let sum = |f: fn(&Metrics) -> f64| per_fold.iter().map(f).sum::<f64>() / n;
    AveragedMetrics {
        folds: per_fold.len(),
        accuracy: sum(|m| m.accuracy),
        precision: sum(|m| m.precision),
        recall: sum(|m| m.recall),
        f_score: sum(|m| m.f_score),
        tn_rate: sum(|m| m.tn_rate),
        fp_rate: sum(|m| m.fp_rate),
        fn_rate: sum(|m| m.fn_rate),
        tp_rate: sum(|m| m.tp_rate),
    }
}

/// Metrics recomputed from summed confusion counts across folds; these always
/// satisfy the exact identities (F = 2PR/(P+R)).
pub fn pool_metrics(per_fold: &[Metrics]) -> Metrics {
    let (mut tn, mut fp, mut fn_, mut tp) = (0u64, 0u64, 0u64, 0u64);
    for m in per_fold {
        tn += m.tn;
        fp += m.fp;
        fn_ += m.fn_;
        tp += m.tp;
    }
    Metrics::from_counts(tn, fp, fn_, tp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compute_metrics_example() {
        // preds vs labels: tn, tp, fp, fn, tn, tp
        let preds = [0, 1, 1, 0, 0, 1];
        let labels = [0, 1, 0, 1, 0, 1];
        let m = compute_metrics(&preds, &labels).unwrap();
        assert_eq!((m.tn, m.fp, m.fn_, m.tp), (2, 1, 1, 2));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f_score - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
        // row-normalized percentages
        assert!((m.tp_rate - 200.0 / 3.0).abs() < 1e-12);
        assert!((m.fn_rate - 100.0 / 3.0).abs() < 1e-12);
        assert!((m.tn_rate - 200.0 / 3.0).abs() < 1e-12);
        assert!((m.fp_rate - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_denominators_are_zero() {
        // never predicts broken: precision denom 0
        let m = compute_metrics(&[0, 0, 0], &[0, 0, 1]).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f_score, 0.0);
        // no broken labels at all: recall + rates degenerate
        let m = compute_metrics(&[0, 1], &[0, 0]).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.tp_rate, 0.0);
        assert_eq!(m.fn_rate, 0.0);
    }

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(m.f_score, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.tp_rate, 100.0);
        assert_eq!(m.tn_rate, 100.0);
    }

    #[test]
    fn contract_violations() {
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[2], &[1]).is_err());
        assert!(compute_metrics(&[1], &[3]).is_err());
    }

    #[test]
    fn averaged_differs_from_pooled_on_uneven_folds() {
        let folds = [
            Metrics::from_counts(10, 0, 0, 2),  // perfect small fold
            Metrics::from_counts(50, 10, 8, 2), // weak big fold
        ];
        let avg = average_metrics(&folds);
        let pooled = pool_metrics(&folds);
        // pooled satisfies F = 2PR/(P+R) exactly
        let f = 2.0 * pooled.precision * pooled.recall / (pooled.precision + pooled.recall);
        assert!((pooled.f_score - f).abs() < 1e-15);
        // fold-averaged F is the mean of per-fold F, not derived from
        // averaged precision/recall
        let mean_f = (folds[0].f_score + folds[1].f_score) / 2.0;
        assert!((avg.f_score - mean_f).abs() < 1e-15);
        let harmonic = 2.0 * avg.precision * avg.recall / (avg.precision + avg.recall);
        assert!((avg.f_score - harmonic).abs() > 1e-6);
    }

    #[test]
    fn f_score_binary_matches_compute_metrics() {
        let preds = [1, 0, 1, 1, 0];
        let labels = [1, 1, 0, 1, 0];
        let full = compute_metrics(&preds, &labels).unwrap();
        assert_eq!(f_score_binary(&preds, &labels), full.f_score);
    }
}
