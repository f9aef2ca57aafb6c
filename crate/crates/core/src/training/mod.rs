//! Mini-batch Adam training with per-epoch validation, best-epoch
//! checkpointing and a k-fold driver.

mod source;

pub use source::{BatchSource, TensorDataset};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{save_checkpoint, ForwardOptions, Model, ModelSpec};
use crate::nn::{Adam, AdamConfig, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Drives mini-batch shuffling and dropout masks.
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 128, 300 epochs, Adam(1e-3, 0.9, 0.999).
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 300,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's mini-batches.
    pub train_loss: f64,
    /// Training-mode (dropout on) accuracy over the epoch.
    pub train_accuracy: f64,
    /// Inference-mode accuracy on the validation split.
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

/// Index of the highest validation accuracy, earliest on ties.
pub fn select_best_epoch(history: &[EpochRecord]) -> Result<usize> {
    let first = history
        .first()
        .ok_or_else(|| Error::Input("cannot select from an empty history".into()))?;
    let mut best = (0, first.val_accuracy);
    for (i, r) in history.iter().enumerate().skip(1) {
        if r.val_accuracy > best.1 {
            best = (i, r.val_accuracy);
        }
    }
    Ok(best.0)
}

/// Where training writes its artifacts. Both are optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Receives `epoch-NNNN.ckpt` for every epoch that improves validation
    /// accuracy.
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON, one record per epoch.
    pub log_path: Option<PathBuf>,
    /// Extra key/values stored in every checkpoint.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_model: Model,
    pub final_model: Model,
    pub checkpoints: Vec<PathBuf>,
}

/// Inference-mode predicted class of each listed sample.
pub fn predict(model: &Model, data: &dyn BatchSource, indices: &[usize], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (img, aud, _) = data.batch(chunk);
        out.extend(model.forward(&img, &aud)?.predictions());
    }
    Ok(out)
}

/// Inference-mode accuracy on the listed samples.
pub fn accuracy(model: &Model, data: &dyn BatchSource, indices: &[usize], batch_size: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Config("accuracy over an empty split".into()));
    }
    let preds = predict(model, data, indices, batch_size)?;
    let labels = data.labels(indices);
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / indices.len() as f64)
}

struct StepResult {
    loss: f64,
    correct: usize,
}

fn train_step(model: &mut Model, adam: &mut Adam, data: &dyn BatchSource, chunk: &[usize], dropout_seed: u64) -> Result<StepResult> {
    let (img, aud, labels) = data.batch(chunk);
    let (loss, correct, grads, stats) = {
        let mut g = Graph::new(model.store(), true, dropout_seed);
        let heads = model.graph(&mut g, &img, &aud, ForwardOptions::default())?;
        let preds = crate::models::Logits::new(g.value(heads.logits).clone()).predictions();
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let loss = g.softmax_cross_entropy(heads.logits, &labels)?;
        let lv = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        (lv, correct, grads, g.batch_stats().clone())
    };
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            batch: 0,
            loss,
        });
    }
    adam.step(model.store_mut(), &grads);
    for (bn, (mean, var)) in stats {
        model.store_mut().bn_mut()[bn].update(&mean, &var);
    }
    Ok(StepResult { loss, correct })
}

fn unix_time() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains `model` on `train_idx`, validating on `val_idx` after each epoch.
/// Deterministic given the model, data, indices and `cfg.seed`.
pub fn train(
    mut model: Model,
    data: &dyn BatchSource,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("training and validation splits must be nonempty".into()));
    }
    if let Some(&bad) = train_idx.iter().chain(val_idx).find(|&&i| i >= data.len()) {
        return Err(Error::Config(format!("split index {bad} out of range ({} samples)", data.len())));
    }
    let mut adam = Adam::new(cfg.adam(), model.store());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_idx.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Model)> = None;
    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = train_step(&mut model, &mut adam, data, chunk, rng.gen()).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { epoch, batch: b, loss },
                other => other,
            })?;
            loss_sum += step.loss * chunk.len() as f64;
            correct += step.correct;
        }
        let val_accuracy = accuracy(&model, data, val_idx, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            val_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} val acc {:.4} ({:.1}s)",
            rec.train_loss,
            rec.train_accuracy,
            rec.val_accuracy,
            rec.wall_seconds
        );
        if let Some(path) = &out.log_path {
            let mut line = serde_json::to_value(&rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
            line["timestamp"] = serde_json::json!(unix_time());
            append_line(path, &line.to_string())?;
        }
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            if let Some(dir) = &out.checkpoint_dir {
                let path = dir.join(format!("epoch-{epoch:04}.ckpt"));
                let mut meta = out.metadata.clone();
                meta.insert("epoch".into(), serde_json::json!(epoch));
                meta.insert("val_accuracy".into(), serde_json::json!(val_accuracy));
                meta.insert("train_config".into(), serde_json::to_value(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?);
                save_checkpoint(&path, &model, &meta)?;
                checkpoints.push(path);
            }
            best = Some((val_accuracy, model.clone()));
        }
        history.push(rec);
    }
    let best_epoch = select_best_epoch(&history)?;
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_model,
        final_model: model,
        checkpoints,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    /// Best-epoch validation accuracy of each fold.
    pub fold_accuracies: Vec<f64>,
    pub best_epochs: Vec<usize>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single fold).
    pub std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Trains one fresh model per fold (fold `f` held out for validation).
pub fn cross_validate(
    spec: &ModelSpec,
    model_seed: u64,
    data: &dyn BatchSource,
    folds: &crate::dataset::FoldAssignment,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CrossValidation> {
    let mut fold_accuracies = Vec::with_capacity(folds.k());
    let mut best_epochs = Vec::with_capacity(folds.k());
    for f in 0..folds.k() {
        let outputs = TrainOutputs {
            checkpoint_dir: out_dir.map(|d| d.join(format!("fold-{f}"))),
            log_path: out_dir.map(|d| d.join(format!("fold-{f}")).join("train-log.jsonl")),
            metadata: BTreeMap::from([("fold".to_string(), serde_json::json!(f))]),
        };
        let model = Model::build(spec, model_seed)?;
        let o = train(model, data, &folds.train(f), &folds.fold(f), cfg, &outputs)?;
        fold_accuracies.push(o.history[o.best_epoch].val_accuracy);
        best_epochs.push(o.best_epoch);
    }
    let (mean, std) = mean_std(&fold_accuracies);
    Ok(CrossValidation {
        fold_accuracies,
        best_epochs,
        mean,
        std,
    })
}
