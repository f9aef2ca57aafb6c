use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{EvalReport, EvalSet};
use crate::classes::Target;
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::tensor::Tensor;

/// One network's headline metrics on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arch: String,
    pub samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attack_success_rate: Option<f64>,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        ReportRow {
            arch: r.arch.clone(),
            samples: r.samples,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            attack_success_rate: r.attack_success_rate,
        }
    }
}

/// Evaluation set -> network name -> metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tables: BTreeMap<EvalSet, BTreeMap<String, ReportRow>>,
}

impl Report {
    pub fn add(&mut self, r: &EvalReport) {
        self.tables.entry(r.set).or_default().insert(r.network.clone(), r.into());
    }

    /// Plain-text rendering, one table per evaluation set.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (set, rows) in &self.tables {
            let title = match set {
                EvalSet::Normal => "without attack (normal pairs)",
                EvalSet::Attack => "under attack (anomaly pairs)",
                EvalSet::Mixed => "mixed pairs",
            };
            out.push_str(&format!("{title}\n"));
            out.push_str(&format!(
                "{:<26} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
                "network", "accuracy", "precision", "recall", "f1", "attack%"
            ));
            for (name, r) in rows {
                let asr = r.attack_success_rate.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
                out.push_str(&format!(
                    "{name:<26} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {asr:>9}\n",
                    100.0 * r.accuracy,
                    100.0 * r.precision,
                    100.0 * r.recall,
                    100.0 * r.f1
                ));
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Input(e.to_string()))?;
    write_atomic(path, &json)
}

pub fn read_report(path: &Path) -> Result<Report> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn label_name(l: usize) -> String {
    Target::from_index(l).map_or_else(|| l.to_string(), |t| t.name().to_string())
}

/// `x,y,z,label` rows.
pub fn write_tsne_csv(path: &Path, points: &Tensor, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Input(format!("t-SNE csv: {e}"));
    w.write_record(["x", "y", "z", "label"]).map_err(err)?;
    for (i, &l) in labels.iter().enumerate() {
        let p = points.row(i);
        w.write_record([p[0].to_string(), p[1].to_string(), p[2].to_string(), label_name(l)])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("t-SNE csv: {e}")))?;
    write_atomic(path, &bytes)
}

const PALETTE: [[u8; 3]; 5] = [[46, 160, 67], [230, 140, 20], [120, 60, 200], [210, 40, 40], [20, 40, 160]];

/// Scatter plot of the first two coordinates, coloured by label.
pub fn render_scatter_png(path: &Path, points: &Tensor, labels: &[usize]) -> Result<()> {
    let size = 600u32;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let n = points.dim0();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..n {
        for k in 0..2 {
            lo[k] = lo[k].min(points.row(i)[k]);
            hi[k] = hi[k].max(points.row(i)[k]);
        }
    }
    let margin = 20.0;
    let span = (size as f64) - 2.0 * margin;
    let to_px = |v: f64, k: usize| {
        let r = if hi[k] > lo[k] { (v - lo[k]) / (hi[k] - lo[k]) } else { 0.5 };
        (margin + r * span) as i64
    };
    for (i, &l) in labels.iter().enumerate().take(n) {
        let (cx, cy) = (to_px(points.row(i)[0], 0), to_px(points.row(i)[1], 1));
        let c = PALETTE[l % PALETTE.len()];
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (x, y) = (cx + dx, size as i64 - 1 - (cy + dy));
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, Rgb(c));
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
