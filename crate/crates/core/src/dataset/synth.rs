//! Synthetic stand-ins for the speech and sign corpora, written in the same
//! on-disk layouts as the real ones. Each command word is a pair of tones
//! with jittered pitch, level, onset and length; each sign is drawn at a
//! random size on a noisy background with a bounding-box annotation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_dsp::{write_wav, CLIP_LEN, SAMPLE_RATE};
use crate::classes::CommandClass;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

fn tones(class: CommandClass) -> (f64, f64) {
    match class {
        CommandClass::Go => (350.0, 1200.0),
        CommandClass::Right => (600.0, 1800.0),
        CommandClass::Left => (850.0, 2500.0),
        CommandClass::Stop => (1300.0, 3100.0),
    }
}

/// One second of audio for `class`: two tones starting within the first
/// 15 ms, lasting 0.6-1.0 s, plus low-level noise.
pub fn synth_clip(class: CommandClass, rng: &mut impl Rng) -> Vec<f64> {
    let (f1, f2) = tones(class);
    let f1 = f1 * rng.gen_range(0.96..1.04);
    let f2 = f2 * rng.gen_range(0.96..1.04);
    let (a1, a2) = (rng.gen_range(0.2..0.45), rng.gen_range(0.1..0.3));
    let onset = rng.gen_range(0..240);
    let len = rng.gen_range(9_600..16_000).min(CLIP_LEN - onset);
    let ramp = 160.0;
    let sr = SAMPLE_RATE as f64;
    (0..CLIP_LEN)
        .map(|n| {
            let noise = rng.gen_range(-0.01..0.01);
            if n < onset || n >= onset + len {
                return noise;
            }
            let t = (n - onset) as f64;
            let env = (t / ramp).min(1.0).min((len as f64 - t) / ramp);
            let s = a1 * (2.0 * PI * f1 * t / sr).sin() + a2 * (2.0 * PI * f2 * t / sr).sin();
            (env * s + noise).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Writes `root/<word>/synth_NNNN.wav` for the four command words.
pub fn write_speech_corpus(root: &Path, per_class: usize, seed: u64) -> Result<()> {
    for class in CommandClass::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + class.index() as u64));
        for i in 0..per_class {
            let samples = synth_clip(class, &mut rng);
            write_wav(&root.join(class.name()).join(format!("synth_{i:04}.wav")), &samples)?;
        }
    }
    Ok(())
}

/// Whether normalised sign coordinates `(u, v)` (v pointing down, both in
/// [-1, 1]) fall on the white glyph of `class`.
fn glyph(class: CommandClass, u: f64, v: f64) -> bool {
    let arrow_right = |u: f64, v: f64| {
        (v.abs() < 0.15 && (-0.6..0.1).contains(&u)) || ((0.1..0.65).contains(&u) && v.abs() <= (0.65 - u) * 0.9)
    };
    match class {
        CommandClass::Stop => v.abs() < 0.18 && u.abs() < 0.62,
        CommandClass::Right => arrow_right(u, v),
        CommandClass::Left => arrow_right(-u, v),
        CommandClass::Go => arrow_right(-v, u),
    }
}

/// Whether `(u, v)` lies on the sign plate.
fn plate(class: CommandClass, u: f64, v: f64) -> bool {
    match class {
        CommandClass::Stop => u.abs().max(v.abs()).max((u.abs() + v.abs()) / 2f64.sqrt()) <= 1.0,
        _ => u * u + v * v <= 1.0,
    }
}

/// A `size x size` image with the sign filling the box `[m, size - m)` in
/// both axes; returns the image and that box.
pub fn synth_sign(class: CommandClass, size: u32, rng: &mut impl Rng) -> (RgbImage, (u32, u32, u32, u32)) {
    let margin = (size as f64 * 0.1).round() as u32;
    let (lo, hi) = (margin, size - margin);
    let bg = [rng.gen_range(40..200u8), rng.gen_range(40..200u8), rng.gen_range(40..200u8)];
    let plate_rgb: [f64; 3] = match class {
        CommandClass::Stop => [200.0, 25.0, 35.0],
        _ => [25.0, 65.0, 190.0],
    };
    let gain = rng.gen_range(0.7..1.2);
    let half = (hi - lo) as f64 / 2.0;
    let centre = (lo + hi) as f64 / 2.0;
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5 - centre) / half;
            let v = (y as f64 + 0.5 - centre) / half;
            let base = if plate(class, u, v) {
                if glyph(class, u, v) {
                    [235.0, 235.0, 235.0]
                } else {
                    plate_rgb
                }
            } else {
                bg.map(|c| c as f64)
            };
            let px = base.map(|c| (c * gain + rng.gen_range(-15.0..15.0)).clamp(0.0, 255.0) as u8);
            img.put_pixel(x, y, Rgb(px));
        }
    }
    (img, (lo, lo, hi, hi))
}

fn write_class(dir: &Path, gtsrb_id: u32, n: usize, rng: &mut ChaCha8Rng, draw: impl Fn(u32, &mut ChaCha8Rng) -> (RgbImage, (u32, u32, u32, u32))) -> Result<()> {
    let mut csv = String::from("Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n");
    for i in 0..n {
        let size = rng.gen_range(15..=80);
        let (img, (x1, y1, x2, y2)) = draw(size, rng);
        let name = format!("00000_{i:05}.ppm");
        let path = dir.join(&name);
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        img.save(&path).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        csv.push_str(&format!("{name};{size};{size};{x1};{y1};{x2};{y2};{gtsrb_id}\n"));
    }
    write_atomic(&dir.join(format!("GT-{gtsrb_id:05}.csv")), csv.as_bytes())
}

/// Writes a GTSRB-style tree `root/Final_Training/Images/NNNNN/` with
/// `per_class` PPM images and a `GT-NNNNN.csv` for every mapped class, plus
/// one unmapped decoy class.
pub fn write_sign_corpus(root: &Path, class_map: &BTreeMap<u32, CommandClass>, per_class: usize, seed: u64) -> Result<()> {
    let images = root.join("Final_Training").join("Images");
    for (&id, &class) in class_map {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x51_6000 + id as u64));
        write_class(&images.join(format!("{id:05}")), id, per_class, &mut rng, |s, r| synth_sign(class, s, r))?;
    }
    let decoy = (0..).find(|id| !class_map.contains_key(id)).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0);
    write_class(&images.join(format!("{decoy:05}")), decoy, 3, &mut rng, |s, r| {
        let (mut img, roi) = synth_sign(CommandClass::Stop, s, r);
        img.pixels_mut().for_each(|p| p.0.swap(0, 1));
        (img, roi)
    })
}
