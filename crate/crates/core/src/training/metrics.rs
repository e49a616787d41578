use std::fmt;

use crate::error::{Error, Result};

/// Confusion counts and the derived rates; malware is the positive class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Zero-denominator precision, recall and F1 are reported as 0.
pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::arg("no predictions to score"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, tn, fn_))
}

/// Means of the four rates across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanMetrics {
    pub runs: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn mean_metrics(runs: &[Metrics]) -> Result<MeanMetrics> {
    if runs.is_empty() {
        return Err(Error::arg("no runs to average"));
    }
    let n = runs.len() as f64;
    let avg = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    Ok(MeanMetrics {
        runs: runs.len(),
        accuracy: avg(|m| m.accuracy),
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
    })
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy={:.2}", self.accuracy)?;
        writeln!(f, "precision={:.2}", self.precision)?;
        writeln!(f, "recall={:.2}", self.recall)?;
        writeln!(f, "f1={:.2}", self.f1)?;
        writeln!(f, "tp={}", self.tp)?;
        writeln!(f, "fp={}", self.fp)?;
        writeln!(f, "tn={}", self.tn)?;
        write!(f, "fn={}", self.fn_)
    }
}

impl fmt::Display for MeanMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "runs={}", self.runs)?;
        writeln!(f, "mean_accuracy={:.2}", self.accuracy)?;
        writeln!(f, "mean_precision={:.2}", self.precision)?;
        writeln!(f, "mean_recall={:.2}", self.recall)?;
        write!(f, "mean_f1={:.2}", self.f1)
    }
}
