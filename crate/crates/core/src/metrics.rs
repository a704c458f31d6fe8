//! Multiclass evaluation: confusion matrix, macro-averaged one-vs-rest
//! precision, recall, specificity and F1, G-mean, and one-vs-rest ROC AUC.

use log::info;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::argmax_rows;

/// How the G-mean combines per-class rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GMeanKind {
    /// `sqrt(macro_recall × macro_specificity)`.
    #[default]
    RecallSpecificity,
    /// Geometric mean of the per-class recalls.
    ClassRecalls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `confusion[true][predicted]`.
    pub confusion: Array2<u64>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
    pub g_mean: f64,
    pub auc: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "accuracy,precision,recall,specificity,f1,g_mean,auc";

    pub fn values(&self) -> [(&'static str, f64); 7] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.macro_precision),
            ("recall", self.macro_recall),
            ("specificity", self.macro_specificity),
            ("f1", self.macro_f1),
            ("g_mean", self.g_mean),
            ("auc", self.auc),
        ]
    }

    /// Comma-separated scalars in [`Self::CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|(_, v)| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Array2<u64> {
    let mut m = Array2::zeros((k, k));
    for (&p, &t) in predictions.iter().zip(labels) {
        m[[t, p]] += 1;
    }
    m
}

/// Per-class `(precision, recall, specificity, f1)` from a confusion matrix.
pub fn per_class_rates(confusion: &Array2<u64>) -> Vec<(f64, f64, f64, f64)> {
    let k = confusion.nrows();
    let n: u64 = confusion.sum();
    (0..k)
        .map(|c| {
            let tp = confusion[[c, c]];
            let actual: u64 = confusion.row(c).sum();
            let predicted: u64 = confusion.column(c).sum();
            let fn_ = actual - tp;
            let fp = predicted - tp;
            let tn = n - tp - fn_ - fp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let specificity = ratio(tn, tn + fp);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (precision, recall, specificity, f1)
        })
        .collect()
}

pub fn evaluate(scores: ArrayView2<f64>, labels: &[usize]) -> Result<EvalReport> {
    evaluate_with(scores, labels, GMeanKind::default())
}

pub fn evaluate_with(scores: ArrayView2<f64>, labels: &[usize], g_mean: GMeanKind) -> Result<EvalReport> {
    let (n, k) = scores.dim();
    if n == 0 || n != labels.len() {
        return Err(Error::Input(format!("{n} score rows for {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }
    let predictions = argmax_rows(scores);
    let confusion = confusion_matrix(&predictions, labels, k);
    let rates = per_class_rates(&confusion);
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| rates.iter().map(f).sum::<f64>() / k as f64;
    let macro_precision = mean(|r| r.0);
    let macro_recall = mean(|r| r.1);
    let macro_specificity = mean(|r| r.2);
    let macro_f1 = mean(|r| r.3);
    let accuracy = confusion.diag().sum() as f64 / n as f64;
    let g = match g_mean {
        GMeanKind::RecallSpecificity => (macro_recall * macro_specificity).sqrt(),
        GMeanKind::ClassRecalls => {
            if rates.iter().any(|r| r.1 == 0.0) {
                0.0
            } else {
                (rates.iter().map(|r| r.1.ln()).sum::<f64>() / k as f64).exp()
            }
        }
    };

    let mut aucs = Vec::with_capacity(k);
    for class in 0..k {
        match auc_ovr(scores, labels, class) {
            Ok(a) => aucs.push(a),
            Err(Error::UndefinedAuc { .. }) => {
                info!("AUC for class {class} is undefined and left out of the macro mean")
            }
            Err(e) => return Err(e),
        }
    }
    let auc = if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };

    Ok(EvalReport {
        confusion,
        accuracy,
        macro_precision,
        macro_recall,
        macro_specificity,
        macro_f1,
        g_mean: g,
        auc,
    })
}

/// One-vs-rest ROC area for `class` by the trapezoid rule over every
/// distinct score threshold.
///
/// Accumulated in integer half-units so the result equals the Mann–Whitney
/// pair count `(#{pos > neg} + ½·#{pos = neg}) / (P·N)` exactly.
pub fn auc_ovr(scores: ArrayView2<f64>, labels: &[usize], class: usize) -> Result<f64> {
    let (n, k) = scores.dim();
    if class >= k || n != labels.len() {
        return Err(Error::Input(format!(
            "class {class} with {k} score columns, {n} rows, {} labels",
            labels.len()
        )));
    }
    let mut pairs: Vec<(f64, bool)> = (0..n)
        .map(|i| (scores[[i, class]], labels[i] == class))
        .collect();
    let positives = pairs.iter().filter(|p| p.1).count() as u128;
    let negatives = n as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc { class });
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    // twice the area, in units of one (positive, negative) pair
    let mut area2: u128 = 0;
    let mut tp: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0u128, 0u128);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
        i = j;
    }
    Ok(area2 as f64 / (2 * positives * negatives) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions() {
        let scores = array![[0.9, 0.1, 0.0], [0.1, 0.8, 0.1], [0.0, 0.2, 0.7], [0.6, 0.3, 0.1]];
        let r = evaluate(scores.view(), &[0, 1, 2, 0]).unwrap();
        for (name, v) in r.values() {
            assert_eq!(v, 1.0, "{name}");
        }
    }

    /// Scores that reproduce a binary confusion matrix with the given counts.
    pub(crate) fn binary_fixture(tp: usize, fn_: usize, fp: usize, tn: usize) -> (Array2<f64>, Vec<usize>) {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (count, label, predict_positive) in [(tp, 1, true), (fn_, 1, false), (fp, 0, true), (tn, 0, false)] {
            for _ in 0..count {
                scores.extend_from_slice(if predict_positive { &[0.2, 0.8] } else { &[0.8, 0.2] });
                labels.push(label);
            }
        }
        (Array2::from_shape_vec((labels.len(), 2), scores).unwrap(), labels)
    }

    #[test]
    fn binary_confusion_fixture() {
        let (scores, labels) = binary_fixture(40, 10, 5, 45);
        let r = evaluate(scores.view(), &labels).unwrap();
        assert_eq!(r.confusion, array![[45, 5], [10, 40]]);
        let rates = per_class_rates(&r.confusion);
        let (p, rc, s, f1) = rates[1];
        assert!((rc - 0.8).abs() < 1e-12);
        assert!((p - 8.0 / 9.0).abs() < 1e-12);
        assert!((s - 0.9).abs() < 1e-12);
        assert!((f1 - 16.0 / 19.0).abs() < 1e-12);
        assert!((r.accuracy - 0.85).abs() < 1e-12);
    }

    #[test]
    fn single_class_predictor() {
        let scores = Array2::from_shape_fn((10, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let r = evaluate(scores.view(), &labels).unwrap();
        assert_eq!(r.accuracy, 0.5);
        let rates = per_class_rates(&r.confusion);
        assert_eq!(rates[0].1, 1.0);
        assert_eq!(rates[1].1, 0.0);
        assert_eq!(r.macro_recall, 0.5);
        assert_eq!(rates[1].0, 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let scores = array![[0.1, 0.9]];
        assert!(matches!(evaluate(scores.view(), &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn auc_extremes() {
        let scores = array![[0.9], [0.8], [0.1], [0.2]];
        let labels = [0, 0, 1, 1];
        assert_eq!(auc_ovr(scores.view(), &labels, 0).unwrap(), 1.0);
        let flat = array![[0.5], [0.5], [0.5], [0.5]];
        assert_eq!(auc_ovr(flat.view(), &labels, 0).unwrap(), 0.5);
        assert!(matches!(
            auc_ovr(scores.view(), &[0, 0, 0, 0], 0),
            Err(Error::UndefinedAuc { class: 0 })
        ));
    }

    #[test]
    fn auc_with_tie_matches_pair_count() {
        // positives 0.9, 0.5, 0.3; negatives 0.5, 0.2, 0.1
        let scores = array![[0.9], [0.5], [0.3], [0.5], [0.2], [0.1]];
        let labels = [0, 0, 0, 1, 1, 1];
        // greater: 0.9>all(3) + 0.5>{0.2,0.1}(2) + 0.3>{0.2,0.1}(2) = 7; ties: 1
        let expected = (7.0 + 0.5) / 9.0;
        assert_eq!(auc_ovr(scores.view(), &labels, 0).unwrap(), expected);
    }

    #[test]
    fn class_recall_gmean_variant() {
        let (scores, labels) = binary_fixture(40, 10, 5, 45);
        let r = evaluate_with(scores.view(), &labels, GMeanKind::ClassRecalls).unwrap();
        assert!((r.g_mean - (0.8f64 * 0.9).sqrt()).abs() < 1e-12);
    }
}
