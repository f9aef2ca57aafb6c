//! On-disk feature store.
//!
//! `features.bin` layout (little-endian):
//!
//! | bytes | content                          |
//! |-------|----------------------------------|
//! | 8     | magic `AVGFEAT\0`                |
//! | 4     | format version (`1`)             |
//! | 8     | row count `n`                    |
//! | 8     | column count (always 1000)       |
//! | 8·n·c | `f64` values, one row per clip   |
//!
//! `features.csv` is the sidecar manifest with columns
//! `row,clip_id,class,source_path`, row `i` describing binary row `i`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classes::CommandClass;
use crate::error::{Error, Result};
use crate::fsutil::{self, Reader};

use super::{FeatureVector, FEATURE_DIM};

const MAGIC: &[u8; 8] = b"AVGFEAT\0";
const VERSION: u32 = 1;
pub const BIN_NAME: &str = "features.bin";
pub const MANIFEST_NAME: &str = "features.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub clip_id: String,
    pub class: CommandClass,
    pub source: String,
    pub features: FeatureVector,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    row: usize,
    clip_id: String,
    class: CommandClass,
    source_path: String,
}

pub fn encode_features(records: &[FeatureRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + records.len() * FEATURE_DIM * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u64).to_le_bytes());
    for r in records {
        fsutil::put_f64s(&mut out, r.features.values());
    }
    out
}

fn encode_manifest(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (row, r) in records.iter().enumerate() {
        w.serialize(ManifestRow {
            row,
            clip_id: r.clip_id.clone(),
            class: r.class,
            source_path: r.source.clone(),
        })
        .map_err(|e| Error::Dataset(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Dataset(e.to_string()))
}

/// Writes `features.bin` and `features.csv` into `dir`, returning both paths.
pub fn write_feature_store(dir: &Path, records: &[FeatureRecord]) -> Result<Vec<PathBuf>> {
    let bin = dir.join(BIN_NAME);
    let csv = dir.join(MANIFEST_NAME);
    fsutil::write_atomic(&bin, &encode_features(records))?;
    fsutil::write_atomic(&csv, &encode_manifest(records)?)?;
    Ok(vec![bin, csv])
}

pub fn read_feature_store(dir: &Path) -> Result<Vec<FeatureRecord>> {
    let bin_path = dir.join(BIN_NAME);
    let bytes = fsutil::read(&bin_path)?;
    let bad = |why: &str| Error::Dataset(format!("{}: {why}", bin_path.display()));
    let mut r = Reader::new(&bytes);
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a feature store"));
    }
    if r.u32() != Some(VERSION) {
        return Err(bad("unsupported version"));
    }
    let rows = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let cols = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
    if cols != FEATURE_DIM {
        return Err(bad("unexpected column count"));
    }

    let csv_path = dir.join(MANIFEST_NAME);
    let mut rdr = csv::Reader::from_path(&csv_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", csv_path.display())))?;
    let manifest: Vec<ManifestRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(format!("{}: {e}", csv_path.display())))?;
    if manifest.len() != rows {
        return Err(bad("row count disagrees with manifest"));
    }

    let mut out = Vec::with_capacity(rows);
    for (i, m) in manifest.into_iter().enumerate() {
        if m.row != i {
            return Err(Error::Dataset(format!("manifest row {i} is out of order")));
        }
        let values = r.f64s(cols).ok_or_else(|| bad("truncated payload"))?;
        out.push(FeatureRecord {
            clip_id: m.clip_id,
            class: m.class,
            source: m.source_path,
            features: FeatureVector::new(values)?,
        });
    }
    if !r.is_done() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<FeatureRecord> = (0..3)
            .map(|i| FeatureRecord {
                clip_id: format!("c{i}"),
                class: CommandClass::ALL[i],
                source: format!("go/{i}.wav"),
                features: FeatureVector::new((0..1000).map(|j| (i * j) as f64 * 0.5).collect()).unwrap(),
            })
            .collect();
        let paths = write_feature_store(dir.path(), &recs).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(read_feature_store(dir.path()).unwrap(), recs);
    }

    #[test]
    fn truncated_store_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = FeatureRecord {
            clip_id: "a".into(),
            class: CommandClass::Go,
            source: "a.wav".into(),
            features: FeatureVector::new(vec![1.0; 1000]).unwrap(),
        };
        write_feature_store(dir.path(), &[rec]).unwrap();
        let p = dir.path().join(BIN_NAME);
        let mut b = std::fs::read(&p).unwrap();
        b.truncate(b.len() - 8);
        std::fs::write(&p, b).unwrap();
        assert!(read_feature_store(dir.path()).is_err());
    }
}
