//! Confusion counts and the four binary classification metrics.
//!
//! Malicious is the positive class throughout.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: Label, actual: Label) {
        match (predicted, actual) {
            (Label::Malicious, Label::Malicious) => self.tp += 1,
            (Label::Malicious, Label::Benign) => self.fp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Benign, Label::Malicious) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        counts.record(p, y);
    }
    Ok(counts)
}

/// Accuracy, precision, recall and F1 from confusion counts.
///
/// Precision (recall) is 0 when no record was predicted (is) malicious, and
/// F1 is 0 when `2tp + fp + fn = 0`.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "cannot compute metrics over zero records".into(),
        ));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, total),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    })
}
