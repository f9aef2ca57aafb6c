//! Metrics on normal / attack / mixed evaluation sets, penultimate-layer
//! embeddings, and their 3-D t-SNE projection.

mod metrics;
mod report;
mod tsne;

pub use metrics::{
    anomaly_recall, attack_success_rate, weighted_metrics, ClassMetrics, ConfusionMatrix, MetricSummary,
};
pub use report::{read_report, render_scatter_png, write_report, write_tsne_csv, Report, ReportRow};
pub use tsne::{silhouette_score, tsne_3d, TsneConfig, TsneResult};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classes::{Target, N_TARGETS};
use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;
use crate::training::{predict, BatchSource};

/// Which pairs an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSet {
    /// Matched pairs only (no attack).
    Normal,
    /// Anomaly pairs only (under attack).
    Attack,
    Mixed,
}

impl EvalSet {
    pub fn name(self) -> &'static str {
        match self {
            EvalSet::Normal => "normal",
            EvalSet::Attack => "attack",
            EvalSet::Mixed => "mixed",
        }
    }

    pub fn contains(self, target: Target) -> bool {
        match self {
            EvalSet::Normal => !target.is_anomaly(),
            EvalSet::Attack => target.is_anomaly(),
            EvalSet::Mixed => true,
        }
    }

    /// The members of `candidates` belonging to this set.
    pub fn select(self, dataset: &PairedDataset, candidates: &[usize]) -> Vec<usize> {
        candidates
            .iter()
            .copied()
            .filter(|&i| self.contains(dataset.pairs()[i].target))
            .collect()
    }
}

impl fmt::Display for EvalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(EvalSet::Normal),
            "attack" => Ok(EvalSet::Attack),
            "mixed" => Ok(EvalSet::Mixed),
            _ => Err(Error::Config(format!("unknown evaluation set `{s}` (normal, attack or mixed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub network: String,
    pub arch: String,
    pub set: EvalSet,
    pub samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Present whenever the set contains anomaly pairs.
    pub attack_success_rate: Option<f64>,
    pub anomaly_recall: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(model: &Model, set: EvalSet, confusion: ConfusionMatrix) -> Result<Self> {
        let m = weighted_metrics(&confusion)?;
        let recall = anomaly_recall(&confusion).ok();
        Ok(EvalReport {
            network: model.arch().network_name().to_string(),
            arch: model.arch().id().to_string(),
            set,
            samples: confusion.total() as usize,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            per_class: m.per_class,
            attack_success_rate: recall.map(|r| 1.0 - r),
            anomaly_recall: recall,
            confusion,
        })
    }
}

/// Inference-mode confusion matrix over the listed samples.
pub fn confusion_on(model: &Model, data: &dyn BatchSource, indices: &[usize], batch_size: usize) -> Result<ConfusionMatrix> {
    let preds = predict(model, data, indices, batch_size)?;
    ConfusionMatrix::from_predictions(&preds, &data.labels(indices), N_TARGETS)
}

/// Evaluates `model` on the members of `candidates` that belong to `set`.
pub fn evaluate(
    model: &Model,
    dataset: &PairedDataset,
    candidates: &[usize],
    set: EvalSet,
    batch_size: usize,
) -> Result<EvalReport> {
    let idx = set.select(dataset, candidates);
    if idx.is_empty() {
        return Err(Error::Input(format!("no {set} pairs to evaluate")));
    }
    let cm = confusion_on(model, dataset, &idx, batch_size)?;
    EvalReport::from_confusion(model, set, cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `N x E` penultimate activations.
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

/// Inference-mode activations of the layer feeding the classifier.
pub fn embed_penultimate(
    model: &Model,
    data: &dyn BatchSource,
    indices: &[usize],
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if indices.is_empty() {
        return Err(Error::Input("no samples to embed".into()));
    }
    let mut rows = Vec::with_capacity(indices.len() * model.embedding_dim());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (img, aud, _) = data.batch(chunk);
        let e = model.embed(&img, &aud).map_err(|e| match e {
            Error::Input(m) => Error::Input(format!("model is incompatible with the data: {m}")),
            other => other,
        })?;
        rows.extend_from_slice(e.data());
    }
    let embeddings = Tensor::from_vec(&[indices.len(), model.embedding_dim()], rows)?;
    if !embeddings.all_finite() {
        return Err(Error::Input("embeddings are not finite".into()));
    }
    Ok(EmbeddingSet {
        embeddings,
        labels: data.labels(indices),
    })
}
