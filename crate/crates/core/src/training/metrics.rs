use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts and the derived rates. The positive class is label 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub recall: f64,
    pub specificity: f64,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_seed: Option<u64>,
}

impl MetricsReport {
    pub fn sample_count(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run_seed = Some(seed);
        self
    }
}

pub fn compute_metrics(predictions: &[u8], truths: &[u8]) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape {
            op: "compute_metrics",
            left: (predictions.len(), 1),
            right: (truths.len(), 1),
        });
    }
    if truths.is_empty() {
        return Err(Error::Domain("metrics over zero samples".into()));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (t != 0, p != 0) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::UndefinedMetric { missing: "positive" });
    }
    if tn + fp == 0 {
        return Err(Error::UndefinedMetric { missing: "negative" });
    }
    let recall = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    Ok(MetricsReport {
        balanced_accuracy: (recall + specificity) / 2.0,
        recall,
        specificity,
        tp,
        fn_,
        tn,
        fp,
        run_seed: None,
    })
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
