//! Confusion counts and derived classification metrics.
//!
//! Label 1 (the takotsubo-like motion class) is the positive class
//! everywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// Tallies predictions against truth; both sides use labels 0/1.
    pub fn tally(truth: &[u8], predicted: &[u8]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "tally over {} truths vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t > 1 || p > 1 {
                return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
            }
            match (t, p) {
                (1, 1) => c.true_pos += 1,
                (0, 1) => c.false_pos += 1,
                (0, 0) => c.true_neg += 1,
                _ => c.false_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Metric values; a `None` marks a zero-denominator case, reported as "NA"
/// rather than silently coerced to 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
}

impl MetricsEntry {
    /// Formats one metric for reports: 4 decimals or "NA".
    pub fn fmt(value: Option<f64>) -> String {
        match value {
            Some(v) => format!("{:.4}", v),
            None => "NA".to_string(),
        }
    }
}

/// Sensitivity TP/(TP+FN), specificity TN/(TN+FP), F1 2TP/(2TP+FP+FN) and
/// accuracy. An all-zero confusion is rejected; accuracy is always defined
/// after that check.
pub fn compute_metrics(c: &Confusion) -> Result<MetricsEntry> {
    let n = c.total();
    if n == 0 {
        return Err(Error::InvalidArgument("metrics over an empty confusion".into()));
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(MetricsEntry {
        sensitivity: ratio(c.true_pos, c.true_pos + c.false_neg),
        specificity: ratio(c.true_neg, c.true_neg + c.false_pos),
        f1: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
        accuracy: (c.true_pos + c.true_neg) as f64 / n as f64,
    })
}
