use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{crop_imm, resize, FilterType};
use image::RgbImage;

use crate::classes::CommandClass;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const IMAGE_SIDE: usize = 64;
pub const IMAGES_PER_CLASS: usize = 300;

/// A `64 x 64 x 3` sign crop. Pixels are kept as bytes; [`ImageSample::pixels`]
/// returns them scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    rgb: Vec<u8>,
    pub class: CommandClass,
    pub source_id: String,
}

impl ImageSample {
    pub fn from_rgb(rgb: Vec<u8>, class: CommandClass, source_id: String) -> Result<Self> {
        if rgb.len() != IMAGE_SIDE * IMAGE_SIDE * 3 {
            return Err(Error::Input(format!(
                "image `{source_id}` has {} bytes, expected {}",
                rgb.len(),
                IMAGE_SIDE * IMAGE_SIDE * 3
            )));
        }
        Ok(ImageSample { rgb, class, source_id })
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    /// Channels-last values in [0, 1].
    pub fn pixels(&self) -> impl Iterator<Item = f64> + '_ {
        self.rgb.iter().map(|&v| v as f64 / 255.0)
    }
}

/// GTSRB class ids of the four command signs: Stop (14), Turn right ahead
/// (33), Turn left ahead (34), Ahead only (35).
pub fn default_class_map() -> BTreeMap<u32, CommandClass> {
    BTreeMap::from([
        (14, CommandClass::Stop),
        (33, CommandClass::Right),
        (34, CommandClass::Left),
        (35, CommandClass::Go),
    ])
}

/// Resolves the directory holding the `NNNNN` class folders: either `root`
/// itself or `root/Final_Training/Images`.
pub fn gtsrb_images_dir(root: &Path) -> PathBuf {
    let nested = root.join("Final_Training").join("Images");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

type Roi = (u32, u32, u32, u32);

/// Reads `GT-NNNNN.csv` (semicolon separated, `Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId`).
fn read_annotations(path: &Path) -> Result<BTreeMap<String, Roi>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b';')
        .from_path(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let headers = rdr.headers().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing column `{name}`"),
        })
    };
    let cols = [col("Filename")?, col("Roi.X1")?, col("Roi.Y1")?, col("Roi.X2")?, col("Roi.Y2")?];
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let num = |i: usize| rec.get(cols[i]).and_then(|v| v.trim().parse::<u32>().ok());
        if let (Some(name), Some(x1), Some(y1), Some(x2), Some(y2)) = (rec.get(cols[0]), num(1), num(2), num(3), num(4)) {
            out.insert(name.trim().to_string(), (x1, y1, x2, y2));
        }
    }
    Ok(out)
}

/// Crops to the annotated box (half-open, clamped to the image; ignored
/// when degenerate) and resizes bilinearly to 64x64.
pub fn crop_and_resize(img: &RgbImage, roi: Option<Roi>) -> RgbImage {
    let (w, h) = img.dimensions();
    let cropped = roi.and_then(|(x1, y1, x2, y2)| {
        let (x2, y2) = (x2.min(w), y2.min(h));
        (x1 < x2 && y1 < y2).then(|| crop_imm(img, x1, y1, x2 - x1, y2 - y1).to_image())
    });
    let src = cropped.as_ref().unwrap_or(img);
    resize(src, IMAGE_SIDE as u32, IMAGE_SIDE as u32, FilterType::Triangle)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("ppm" | "png" | "jpg" | "jpeg")
    )
}

fn decode(path: &Path, roi: Option<Roi>) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(crop_and_resize(&img.to_rgb8(), roi))
}

/// Loads exactly `quota` images for every command class in `class_map`,
/// taking source ids (`NNNNN/file`) in sorted order and skipping unreadable
/// files with a warning.
pub fn load_sign_images(
    root: &Path,
    class_map: &BTreeMap<u32, CommandClass>,
    quota: usize,
    exec: Exec,
) -> Result<Vec<ImageSample>> {
    let dir = gtsrb_images_dir(root);
    let mut candidates: BTreeMap<CommandClass, Vec<(String, PathBuf, Option<Roi>)>> = BTreeMap::new();
    for (&id, &class) in class_map {
        let name = format!("{id:05}");
        let class_dir = dir.join(&name);
        if !class_dir.is_dir() {
            return Err(Error::Dataset(format!(
                "GTSRB class {id} ({class}) not found at {}",
                class_dir.display()
            )));
        }
        let gt = class_dir.join(format!("GT-{name}.csv"));
        let rois = if gt.is_file() { read_annotations(&gt)? } else { BTreeMap::new() };
        let entries = fs::read_dir(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&class_dir, e))?.path();
            if !is_image_file(&p) {
                continue;
            }
            let file = p.file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string();
            let roi = rois.get(&file).copied();
            candidates
                .entry(class)
                .or_default()
                .push((format!("{name}/{file}"), p, roi));
        }
    }
    let mut out = Vec::new();
    for (class, mut files) in candidates {
        files.sort();
        let mut kept = Vec::with_capacity(quota);
        // decode in windows so a few bad files do not force decoding the whole class
        let mut start = 0;
        while kept.len() < quota && start < files.len() {
            let end = (start + quota - kept.len()).min(files.len());
            let decoded = exec.map(&files[start..end], |(_, p, roi)| decode(p, *roi));
            for ((sid, _, _), img) in files[start..end].iter().zip(decoded) {
                match img {
                    Ok(img) => kept.push(ImageSample::from_rgb(img.into_raw(), class, sid.clone())?),
                    Err(e) => log::warn!("skipping unreadable sign image: {e}"),
                }
            }
            start = end;
        }
        if kept.len() < quota {
            return Err(Error::Dataset(format!(
                "class {class}: only {} readable images, {quota} required",
                kept.len()
            )));
        }
        out.extend(kept);
    }
    Ok(out)
}
