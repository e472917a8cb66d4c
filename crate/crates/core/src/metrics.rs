//! Multi-class evaluation: confusion matrix, per-class precision / recall /
//! F1, their unweighted (macro) means and accuracy.
//!
//! Conventions:
//! - a per-class ratio with a zero denominator is 0;
//! - `f1_i = 2 p_i r_i / (p_i + r_i)`;
//! - macro values divide by the number of classes `M` even when a class never
//!   occurs;
//! - accuracy is `trace / total`. Summing `TP_i + TN_i` over classes in both
//!   numerator and denominator ranks models identically for single-label data,
//!   so the plain form is reported.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 3;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, label: usize, pred: usize) -> Result<()> {
        let m = self.classes();
        if label >= m || pred >= m {
            return Err(Error::usage(format!(
                "class out of range: label {label}, prediction {pred}, classes {m}"
            )));
        }
        self.counts[label][pred] += 1;
        Ok(())
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::usage("confusion matrices have different class counts"));
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
        Ok(())
    }

    /// CSV with header `true_class,pred_0,...,pred_{M-1}`.
    pub fn to_csv(&self) -> String {
        let m = self.classes();
        let mut out = String::from("true_class");
        for j in 0..m {
            let _ = write!(out, ",pred_{j}");
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{i}");
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Confusion matrix over paired predictions and labels.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &y) in preds.iter().zip(labels) {
        cm.record(y, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::usage("cannot compute metrics from an empty confusion matrix"));
    }
    let m = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..m)
        .map(|i| {
            let tp = cm.get(i, i);
            let predicted: u64 = (0..m).map(|r| cm.get(r, i)).sum();
            let support: u64 = cm.rows()[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / m as f64;
    let trace: u64 = (0..m).map(|i| cm.get(i, i)).sum();
    Ok(MetricsReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: ratio(trace, total),
        total,
        per_class,
    })
}

impl MetricsReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize]) -> Result<Self> {
        macro_metrics(&confusion(preds, labels, N_CLASSES)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(cm.rows(), &[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert_eq!(confusion(&[], &[], 3).unwrap().total(), 0);
        let cm = confusion(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        assert_eq!(cm.rows(), &[vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert!(matches!(confusion(&[3], &[0], 3), Err(Error::Usage(_))));
        assert!(matches!(confusion(&[0], &[0, 1], 3), Err(Error::Usage(_))));
    }

    #[test]
    fn perfect_predictions() {
        let r = MetricsReport::from_predictions(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(
            (r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let r = MetricsReport::from_predictions(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_usage_error() {
        assert!(matches!(macro_metrics(&ConfusionMatrix::new(3)), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_layout() {
        let cm = confusion(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!(cm.to_csv(), "true_class,pred_0,pred_1,pred_2\n0,1,1,0\n1,0,0,0\n2,0,0,0\n");
    }
}
