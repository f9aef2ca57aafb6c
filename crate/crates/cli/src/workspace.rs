//! Workspace layout and run manifests.
//!
//! ```text
//! <workspace>/
//!   features/features.bin, features.csv
//!   dataset/aid.bin, pairs.csv
//!   runs/<arch>/epoch-NNNN.ckpt, best.ckpt, train-log.jsonl, history.json
//!   eval/<arch>-<set>.json
//!   tsne/<arch>.csv, <arch>.png
//!   report/report.json, report.txt
//!   manifests/<run>.json
//! ```
//!
//! Each command owns its output folder (or files) and the manifest naming
//! them, so rerunning a command replaces both together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use avguard::fsutil::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Workspace { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn dataset_file(&self) -> PathBuf {
        self.dataset_dir().join("aid.bin")
    }

    pub fn run_dir(&self, arch: &str) -> PathBuf {
        self.root.join("runs").join(arch)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn tsne_dir(&self) -> PathBuf {
        self.root.join("tsne")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest_path(&self, run: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{run}.json"))
    }

    /// Relative path used inside manifests.
    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

/// Removes a folder a command is about to rewrite.
pub fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            dataset_hash: None,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, v: u64) -> Self {
        self.seeds.insert(name.to_string(), v);
        self
    }

    pub fn input(mut self, name: &str, v: impl Into<String>) -> Self {
        self.inputs.insert(name.to_string(), v.into());
        self
    }

    /// Hashes and records each file.
    pub fn add_files(&mut self, ws: &Workspace, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let bytes = std::fs::read(f).with_context(|| format!("cannot read {}", f.display()))?;
            self.artifacts.push(Artifact {
                path: ws.relative(f),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn write(&self, ws: &Workspace, run: &str) -> Result<PathBuf> {
        let path = ws.manifest_path(run);
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(&path, &json)?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("malformed manifest {}", path.display()))
}

/// Files under `dir`, recursively, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).with_context(|| format!("cannot list {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
