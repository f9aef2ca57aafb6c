use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::images::ImageSample;
use super::FoldAssignment;
use crate::audio_dsp::store::FeatureRecord;
use crate::audio_dsp::{FeatureVector, FEATURE_DIM};
use crate::classes::{CommandClass, Target};
use crate::error::{Error, Result};
use crate::fsutil::{put_f64s, sha256_hex, write_atomic, Reader};
use crate::tensor::Tensor;

/// One audio/image pairing, by index into the dataset's audio and image
/// tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPair {
    pub audio: usize,
    pub image: usize,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AidConfig {
    /// Anomaly pairs created per matched pair (rounded up).
    pub anomaly_fraction: f64,
    pub seed: u64,
}

impl Default for AidConfig {
    fn default() -> Self {
        AidConfig {
            anomaly_fraction: 0.5,
            seed: 0,
        }
    }
}

/// The paired audio-image dataset. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    seed: u64,
    anomaly_fraction: f64,
    audio: Vec<FeatureRecord>,
    images: Vec<ImageSample>,
    pairs: Vec<LabeledPair>,
}

/// Images of each class, as indices into `images`.
pub fn images_by_class(images: &[ImageSample]) -> BTreeMap<CommandClass, Vec<usize>> {
    let mut m: BTreeMap<CommandClass, Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        m.entry(img.class).or_default().push(i);
    }
    m
}

/// Pairs a clip of class `audio_class` with an image of a different class:
/// the class is uniform over the other classes that have images, then the
/// image is uniform within it.
pub fn generate_mismatch(
    audio: usize,
    audio_class: CommandClass,
    images_by_class: &BTreeMap<CommandClass, Vec<usize>>,
    rng: &mut impl Rng,
) -> Result<LabeledPair> {
    let eligible: Vec<&Vec<usize>> = images_by_class
        .iter()
        .filter(|(c, v)| **c != audio_class && !v.is_empty())
        .map(|(_, v)| v)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(format!("no image of a class other than {audio_class} to mismatch with")));
    }
    let class = eligible[rng.gen_range(0..eligible.len())];
    Ok(LabeledPair {
        audio,
        image: class[rng.gen_range(0..class.len())],
        target: Target::Anomaly,
    })
}

/// Builds matched pairs (each clip with a uniform same-class image), then
/// `ceil(anomaly_fraction * matched)` anomaly pairs from clips taken in a
/// seeded shuffled cycle, then shuffles the pair order.
pub fn build_aid(audio: Vec<FeatureRecord>, images: Vec<ImageSample>, cfg: AidConfig) -> Result<PairedDataset> {
    if !(cfg.anomaly_fraction > 0.0 && cfg.anomaly_fraction < 1.0) {
        return Err(Error::Config(format!(
            "anomaly_fraction must be in (0, 1), got {}",
            cfg.anomaly_fraction
        )));
    }
    let groups = images_by_class(&images);
    for class in CommandClass::ALL {
        if groups.get(&class).is_none_or(|v| v.is_empty()) {
            return Err(Error::Dataset(format!("no {class} images")));
        }
        if !audio.iter().any(|a| a.class == class) {
            return Err(Error::Dataset(format!("no {class} clips")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(audio.len() * 2);
    for (i, a) in audio.iter().enumerate() {
        let pool = &groups[&a.class];
        pairs.push(LabeledPair {
            audio: i,
            image: pool[rng.gen_range(0..pool.len())],
            target: Target::Command(a.class),
        });
    }
    let n_anomaly = (cfg.anomaly_fraction * audio.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..audio.len()).collect();
    for k in 0..n_anomaly {
        if k % audio.len() == 0 {
            order.shuffle(&mut rng);
        }
        let i = order[k % audio.len()];
        pairs.push(generate_mismatch(i, audio[i].class, &groups, &mut rng)?);
    }
    pairs.shuffle(&mut rng);
    Ok(PairedDataset {
        seed: cfg.seed,
        anomaly_fraction: cfg.anomaly_fraction,
        audio,
        images,
        pairs,
    })
}

const MAGIC: &[u8; 8] = b"AVGAID\0\0";
const VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn class_byte(c: CommandClass) -> u8 {
    c.index() as u8
}

impl PairedDataset {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn anomaly_fraction(&self) -> f64 {
        self.anomaly_fraction
    }

    pub fn audio(&self) -> &[FeatureRecord] {
        &self.audio
    }

    pub fn images(&self) -> &[ImageSample] {
        &self.images
    }

    pub fn pairs(&self) -> &[LabeledPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.target.index()).collect()
    }

    pub fn class_counts(&self) -> BTreeMap<Target, usize> {
        let mut m = BTreeMap::new();
        for p in &self.pairs {
            *m.entry(p.target).or_insert(0) += 1;
        }
        m
    }

    pub fn audio_class(&self, pair: usize) -> CommandClass {
        self.audio[self.pairs[pair].audio].class
    }

    pub fn image_class(&self, pair: usize) -> CommandClass {
        self.images[self.pairs[pair].image].class
    }

    /// Indices of pairs satisfying `keep`.
    pub fn select(&self, keep: impl Fn(&LabeledPair) -> bool) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| keep(&self.pairs[i])).collect()
    }

    /// Model inputs for the given pairs: images `n x 64 x 64 x 3`, audio
    /// `n x 1000`, and target indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        let side = super::images::IMAGE_SIDE;
        let mut img = Vec::with_capacity(indices.len() * side * side * 3);
        let mut aud = Vec::with_capacity(indices.len() * FEATURE_DIM);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.pairs[i];
            img.extend(self.images[p.image].pixels());
            aud.extend_from_slice(self.audio[p.audio].features.values());
            labels.push(p.target.index());
        }
        let n = indices.len();
        (
            Tensor::from_vec(&[n, side, side, 3], img).expect("image batch shape"),
            Tensor::from_vec(&[n, FEATURE_DIM], aud).expect("audio batch shape"),
            labels,
        )
    }

    /// Checks the pairing invariants exhaustively.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            let (Some(a), Some(img)) = (self.audio.get(p.audio), self.images.get(p.image)) else {
                return Err(Error::Dataset(format!("pair {i} refers to a missing clip or image")));
            };
            let ok = match p.target {
                Target::Command(c) => a.class == c && img.class == c,
                Target::Anomaly => a.class != img.class,
            };
            if !ok {
                return Err(Error::Dataset(format!(
                    "pair {i}: audio {} / image {} labelled {}",
                    a.class,
                    img.class,
                    p.target.name()
                )));
            }
        }
        Ok(())
    }

    /// Canonical byte encoding; equal datasets encode identically.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.anomaly_fraction.to_le_bytes());
        out.extend_from_slice(&(self.audio.len() as u64).to_le_bytes());
        for a in &self.audio {
            put_str(&mut out, &a.clip_id);
            put_str(&mut out, &a.source);
            out.push(class_byte(a.class));
            put_f64s(&mut out, a.features.values());
        }
        out.extend_from_slice(&(self.images.len() as u64).to_le_bytes());
        for img in &self.images {
            put_str(&mut out, &img.source_id);
            out.push(class_byte(img.class));
            out.extend_from_slice(img.rgb());
        }
        out.extend_from_slice(&(self.pairs.len() as u64).to_le_bytes());
        for p in &self.pairs {
            out.extend_from_slice(&(p.audio as u64).to_le_bytes());
            out.extend_from_slice(&(p.image as u64).to_le_bytes());
            out.push(p.target.index() as u8);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Dataset(format!("dataset file: {m}"));
        let mut r = Reader::new(bytes);
        if r.take(8) != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        if r.u32() != Some(VERSION) {
            return Err(bad("unsupported version"));
        }
        let trunc = || bad("truncated");
        let seed = r.u64().ok_or_else(trunc)?;
        let anomaly_fraction = f64::from_bits(r.u64().ok_or_else(trunc)?);
        let string = |r: &mut Reader| -> Result<String> {
            let n = r.u64().ok_or_else(trunc)? as usize;
            let b = r.take(n).ok_or_else(trunc)?;
            String::from_utf8(b.to_vec()).map_err(|_| bad("invalid utf-8"))
        };
        let class = |b: u8| CommandClass::from_index(b as usize).ok_or_else(|| bad("invalid class"));
        let n_audio = r.u64().ok_or_else(trunc)? as usize;
        let mut audio = Vec::with_capacity(n_audio.min(1 << 20));
        for _ in 0..n_audio {
            let clip_id = string(&mut r)?;
            let source = string(&mut r)?;
            let c = class(r.take(1).ok_or_else(trunc)?[0])?;
            let features = FeatureVector::new(r.f64s(FEATURE_DIM).ok_or_else(trunc)?)?;
            audio.push(FeatureRecord {
                clip_id,
                class: c,
                source,
                features,
            });
        }
        let n_images = r.u64().ok_or_else(trunc)? as usize;
        let side = super::images::IMAGE_SIDE;
        let mut images = Vec::with_capacity(n_images.min(1 << 20));
        for _ in 0..n_images {
            let sid = string(&mut r)?;
            let c = class(r.take(1).ok_or_else(trunc)?[0])?;
            let rgb = r.take(side * side * 3).ok_or_else(trunc)?.to_vec();
            images.push(ImageSample::from_rgb(rgb, c, sid)?);
        }
        let n_pairs = r.u64().ok_or_else(trunc)? as usize;
        let mut pairs = Vec::with_capacity(n_pairs.min(1 << 20));
        for _ in 0..n_pairs {
            let audio_i = r.u64().ok_or_else(trunc)? as usize;
            let image_i = r.u64().ok_or_else(trunc)? as usize;
            let t = r.take(1).ok_or_else(trunc)?[0];
            let target = Target::from_index(t as usize).ok_or_else(|| bad("invalid target"))?;
            pairs.push(LabeledPair {
                audio: audio_i,
                image: image_i,
                target,
            });
        }
        if !r.is_done() {
            return Err(bad("trailing bytes"));
        }
        let ds = PairedDataset {
            seed,
            anomaly_fraction,
            audio,
            images,
            pairs,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// SHA-256 of [`PairedDataset::encode`].
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.encode())
    }

    /// Writes the pairs manifest CSV (`pair_id, audio_path, image_id,
    /// audio_class, image_class, target, fold`); `fold` is empty when no
    /// assignment is given.
    pub fn write_manifest(&self, path: &Path, folds: Option<&FoldAssignment>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Dataset(format!("manifest: {e}"));
        w.write_record(["pair_id", "audio_path", "image_id", "audio_class", "image_class", "target", "fold"])
            .map_err(err)?;
        for (i, p) in self.pairs.iter().enumerate() {
            let a = &self.audio[p.audio];
            let img = &self.images[p.image];
            let fold = folds.map(|f| f.fold_of(i).to_string()).unwrap_or_default();
            w.write_record([
                i.to_string().as_str(),
                &a.source,
                &img.source_id,
                a.class.name(),
                img.class.name(),
                p.target.name(),
                &fold,
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
        write_atomic(path, &bytes)
    }
}
