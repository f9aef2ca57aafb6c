use serde::{Deserialize, Serialize};

use crate::classes::ANOMALY_INDEX;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_predictions(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&p, &t) in predictions.iter().zip(labels) {
            if p >= n_classes || t >= n_classes {
                return Err(Error::Input(format!(
                    "class index out of range: label {t}, prediction {p}, {n_classes} classes"
                )));
            }
            cm.counts[t * n_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Input(format!("cannot merge {}-class and {}-class matrices", self.n, other.n)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 (0 on zero denominators) and their
/// support-weighted means.
pub fn weighted_metrics(cm: &ConfusionMatrix) -> Result<MetricSummary> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("metrics of an empty confusion matrix".into()));
    }
    let n = cm.n_classes();
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let support: u64 = cm.row(c).iter().sum();
            let predicted: u64 = (0..n).map(|t| cm.get(t, c)).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
    };
    Ok(MetricSummary {
        accuracy: ratio(cm.trace(), total),
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        per_class,
    })
}

/// Recall of the anomaly class.
pub fn anomaly_recall(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.n_classes() <= ANOMALY_INDEX {
        return Err(Error::Input("confusion matrix has no anomaly class".into()));
    }
    let row = cm.row(ANOMALY_INDEX);
    let support: u64 = row.iter().sum();
    if support == 0 {
        return Err(Error::Input("no anomaly samples were evaluated".into()));
    }
    Ok(ratio(row[ANOMALY_INDEX], support))
}

/// Fraction of anomaly pairs not predicted as anomaly, computed as
/// `1 - recall` so that the two always sum to exactly 1.
pub fn attack_success_rate(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(1.0 - anomaly_recall(cm)?)
}
