use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClsMetricsReport {
    #[serde(rename = "F1")]
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// Binary metrics with the positive class `true`; empty ratios count as 0.
pub fn classification_metrics(predictions: &[bool], labels: &[bool]) -> Result<ClsMetricsReport> {
    if predictions.len() != labels.len() {
        return Err(GowebError::DimMismatch { expected: labels.len(), got: predictions.len() });
    }
    if labels.is_empty() {
        return Err(GowebError::Empty("labels"));
    }
    let (mut tp, mut fp, mut fnn, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnn);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(ClsMetricsReport { f1, precision, recall, accuracy: ratio(tp + tn, labels.len()) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassReport {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub n: usize,
}

/// Single-label multi-class scores. Macro F1 averages over every class seen
/// in either the predictions or the truth.
pub fn multiclass_report<T: Ord + Copy>(pred: &[T], truth: &[T]) -> Result<MulticlassReport> {
    if pred.len() != truth.len() {
        return Err(GowebError::DimMismatch { expected: truth.len(), got: pred.len() });
    }
    if truth.is_empty() {
        return Err(GowebError::Empty("labels"));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / truth.len() as f64;
    let classes: BTreeSet<T> = pred.iter().chain(truth).copied().collect();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let p: Vec<bool> = pred.iter().map(|x| *x == c).collect();
        let l: Vec<bool> = truth.iter().map(|x| *x == c).collect();
        f1_sum += classification_metrics(&p, &l)?.f1;
    }
    // single-label: micro precision = micro recall = accuracy
    Ok(MulticlassReport { accuracy, micro_f1: accuracy, macro_f1: f1_sum / classes.len() as f64, n: truth.len() })
}
