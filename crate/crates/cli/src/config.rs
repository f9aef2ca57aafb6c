//! The run configuration: one TOML file, overridable by flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use avguard::dataset::default_class_map;
use avguard::models::{Arch, ModelSpec};
use avguard::training::TrainConfig;
use avguard::CommandClass;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub evaluation: EvalConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Folder holding the `go`, `right`, `left` and `stop` word folders.
    pub speech_root: Option<PathBuf>,
    /// GTSRB training set root (`Final_Training/Images` or the class folders).
    pub gtsrb_root: Option<PathBuf>,
    pub workspace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// GTSRB class id -> command word.
    pub class_map: BTreeMap<String, String>,
    /// Caps the clips read per word; every clip is used when absent.
    pub clips_per_class: Option<usize>,
    pub images_per_class: usize,
    pub anomaly_fraction: f64,
    pub seed: u64,
    pub folds: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            class_map: default_class_map()
                .into_iter()
                .map(|(id, c)| (id.to_string(), c.name().to_string()))
                .collect(),
            clips_per_class: None,
            images_per_class: avguard::dataset::IMAGES_PER_CLASS,
            anomaly_fraction: 0.5,
            seed: 0,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Widths {
    #[default]
    Paper,
    Compact,
}

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Widths::Paper),
            "compact" => Ok(Widths::Compact),
            _ => Err(format!("unknown width preset `{s}` (paper or compact)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Widths,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: Widths::Paper,
            dropout: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Fold held out for validation and evaluation.
    pub fold: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::paper(0);
        TrainSection {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            seed: t.seed,
            fold: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_seed: u64,
    /// Upper bound on the points embedded by `visualize-tsne`.
    pub tsne_max_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 64,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            tsne_seed: 0,
            tsne_max_points: 1000,
        }
    }
}

/// A single field-level validation failure.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| {
            ConfigErrors(vec![FieldError {
                field: path.display().to_string(),
                message: e.message().to_string(),
            }])
            .into()
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that affects results; the workspace location is
    /// excluded so a moved workspace keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.workspace = None;
        avguard::fsutil::sha256_hex(c.to_toml().as_bytes())
    }

    pub fn class_map(&self) -> Result<BTreeMap<u32, CommandClass>, Vec<FieldError>> {
        let mut errs = Vec::new();
        let mut map = BTreeMap::new();
        for (k, v) in &self.dataset.class_map {
            let field = format!("dataset.class_map.{k}");
            match (k.parse::<u32>(), v.parse::<CommandClass>()) {
                (Ok(id), Ok(c)) => {
                    map.insert(id, c);
                }
                (Err(_), _) => errs.push(err(&field, "key must be a GTSRB class id".into())),
                (_, Err(e)) => errs.push(err(&field, e.to_string())),
            }
        }
        for c in CommandClass::ALL {
            let n = map.values().filter(|&&m| m == c).count();
            if n != 1 && errs.is_empty() {
                errs.push(err("dataset.class_map", format!("`{c}` must be mapped exactly once, found {n}")));
            }
        }
        if errs.is_empty() {
            Ok(map)
        } else {
            Err(errs)
        }
    }

    pub fn model_spec(&self, arch: Arch) -> ModelSpec {
        let mut spec = match self.model.widths {
            Widths::Paper => ModelSpec::paper(arch),
            Widths::Compact => ModelSpec::compact(arch),
        };
        spec.dropout = self.model.dropout;
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            seed: t.seed,
        }
    }

    /// Checks every field that does not depend on the filesystem.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        if let Err(e) = self.class_map() {
            errs.extend(e);
        }
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.anomaly_fraction) {
            errs.push(err("dataset.anomaly_fraction", format!("must be in [0, 1), got {}", d.anomaly_fraction)));
        }
        if d.images_per_class == 0 {
            errs.push(err("dataset.images_per_class", "must be positive".into()));
        }
        if d.clips_per_class == Some(0) {
            errs.push(err("dataset.clips_per_class", "must be positive".into()));
        }
        if d.folds < 2 {
            errs.push(err("dataset.folds", format!("must be at least 2, got {}", d.folds)));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            errs.push(err("model.dropout", format!("must be in [0, 1), got {}", self.model.dropout)));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            errs.push(err("train.batch_size", "must be positive".into()));
        }
        if t.epochs == 0 {
            errs.push(err("train.epochs", "must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            errs.push(err("train.learning_rate", format!("must be positive, got {}", t.learning_rate)));
        }
        for (name, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(err(name, format!("must be in [0, 1), got {b}")));
            }
        }
        if t.fold >= d.folds.max(1) {
            errs.push(err("train.fold", format!("must be below dataset.folds ({}), got {}", d.folds, t.fold)));
        }
        let e = &self.evaluation;
        if e.batch_size == 0 {
            errs.push(err("evaluation.batch_size", "must be positive".into()));
        }
        if !(e.tsne_perplexity > 0.0) {
            errs.push(err("evaluation.tsne_perplexity", "must be positive".into()));
        }
        if e.tsne_iterations == 0 {
            errs.push(err("evaluation.tsne_iterations", "must be positive".into()));
        }
        if (e.tsne_max_points as f64) <= 3.0 * e.tsne_perplexity {
            errs.push(err(
                "evaluation.tsne_max_points",
                format!("must exceed 3 x tsne_perplexity ({})", 3.0 * e.tsne_perplexity),
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }
}

fn err(field: &str, message: String) -> FieldError {
    FieldError {
        field: field.to_string(),
        message,
    }
}

pub const SPEECH_FETCH: &str = "\
The Speech Commands corpus is not downloaded automatically. Fetch it with
  curl -LO http://download.tensorflow.org/data/speech_commands_v0.02.tar.gz
  mkdir speech_commands && tar -xzf speech_commands_v0.02.tar.gz -C speech_commands
and point paths.speech_root (or --speech-root) at the folder containing
go/, right/, left/ and stop/.";

pub const GTSRB_FETCH: &str = "\
The GTSRB training set is not downloaded automatically. Fetch
GTSRB_Final_Training_Images.zip from https://benchmark.ini.rub.de/gtsrb_dataset.html,
unzip it, and point paths.gtsrb_root (or --gtsrb-root) at the extracted GTSRB
folder (the one containing Final_Training/Images/00000 ...).";

/// Confirms a corpus root exists and has the expected sub-folders.
pub fn check_speech_root(cfg: &RunConfig) -> Result<PathBuf, ConfigErrors> {
    let missing = |message: String| {
        ConfigErrors(vec![FieldError {
            field: "paths.speech_root".into(),
            message: format!("{message}\n\n{SPEECH_FETCH}"),
        }])
    };
    let root = cfg.paths.speech_root.clone().ok_or_else(|| missing("not set".into()))?;
    for c in CommandClass::ALL {
        if !root.join(c.name()).is_dir() {
            return Err(missing(format!("{} has no `{}` folder", root.display(), c.name())));
        }
    }
    Ok(root)
}

pub fn check_gtsrb_root(cfg: &RunConfig) -> Result<PathBuf, ConfigErrors> {
    let missing = |message: String| {
        ConfigErrors(vec![FieldError {
            field: "paths.gtsrb_root".into(),
            message: format!("{message}\n\n{GTSRB_FETCH}"),
        }])
    };
    let root = cfg.paths.gtsrb_root.clone().ok_or_else(|| missing("not set".into()))?;
    let images = avguard::dataset::gtsrb_images_dir(&root);
    let map = cfg.class_map().map_err(ConfigErrors)?;
    for id in map.keys() {
        if !images.join(format!("{id:05}")).is_dir() {
            return Err(missing(format!("{} has no class folder {id:05}", images.display())));
        }
    }
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.class_map().unwrap(), default_class_map());
    }

    #[test]
    fn field_level_errors() {
        let mut c = RunConfig::default();
        c.dataset.anomaly_fraction = 1.5;
        c.train.batch_size = 0;
        c.dataset.class_map.insert("14".into(), "halt".into());
        let errs = c.validate().unwrap_err().0;
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"dataset.anomaly_fraction"));
        assert!(fields.contains(&"train.batch_size"));
        assert!(fields.contains(&"dataset.class_map.14"));
    }

    #[test]
    fn hash_ignores_workspace() {
        let mut a = RunConfig::default();
        let h = a.hash();
        a.paths.workspace = Some("/elsewhere".into());
        assert_eq!(a.hash(), h);
        a.train.seed = 9;
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nbatchsize = 3\n").is_err());
    }
}
