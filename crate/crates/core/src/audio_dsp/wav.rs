use std::path::Path;

use crate::classes::CommandClass;
use crate::error::{Error, Result};

use super::{CLIP_LEN, SAMPLE_RATE};

/// One second of mono audio at 16 kHz with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    pub label: Option<CommandClass>,
}

impl AudioClip {
    /// Validates the rate and amplitude range, then zero-pads at the tail or
    /// truncates to exactly [`CLIP_LEN`] samples.
    pub fn new(mut samples: Vec<f64>, sample_rate: u32, label: Option<CommandClass>) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        if let Some(v) = samples.iter().find(|v| !(v.is_finite() && v.abs() <= 1.0)) {
            return Err(Error::Input(format!("sample {v} outside [-1, 1]")));
        }
        samples.resize(CLIP_LEN, 0.0);
        Ok(AudioClip {
            samples,
            sample_rate,
            label,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Reads a 16-bit PCM mono 16 kHz WAV file. Integer samples are divided by
/// 32768. No resampling or down-mixing is attempted.
pub fn load_wav(path: &Path, label: Option<CommandClass>) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported(format!(
            "{} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{}-bit {:?}, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .take(CLIP_LEN)
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    AudioClip::new(samples, SAMPLE_RATE, label)
}

/// Writes samples as 16-bit PCM mono 16 kHz, creating the parent
/// directory. Values are clamped to the representable range.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, rate: u32, data: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn full_second_is_scaled_into_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let data: Vec<i16> = (0..16000).map(|i| if i % 2 == 0 { i16::MIN } else { i16::MAX }).collect();
        write_raw(&p, 1, 16000, &data);
        let clip = load_wav(&p, None).unwrap();
        assert_eq!(clip.samples().len(), 16000);
        assert!(clip.samples().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(clip.samples()[0], -1.0);
        assert_eq!(clip.samples()[1], 32767.0 / 32768.0);
    }

    #[test]
    fn zero_payload_and_short_clip_padding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_raw(&p, 1, 16000, &vec![0; 16000]);
        assert!(load_wav(&p, None).unwrap().samples().iter().all(|&v| v == 0.0));

        let p = dir.path().join("half.wav");
        write_raw(&p, 1, 16000, &vec![1000; 8000]);
        let clip = load_wav(&p, None).unwrap();
        assert_eq!(clip.samples().len(), 16000);
        assert!(clip.samples()[..8000].iter().all(|&v| v != 0.0));
        assert!(clip.samples()[8000..].iter().all(|&v| v == 0.0));

        let p = dir.path().join("long.wav");
        write_raw(&p, 1, 16000, &vec![5; 20000]);
        assert_eq!(load_wav(&p, None).unwrap().samples().len(), 16000);
    }

    #[test]
    fn wrong_rate_or_channels_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_raw(&p, 1, 8000, &[0; 100]);
        assert!(matches!(load_wav(&p, None), Err(Error::UnsupportedFormat { .. })));
        let p = dir.path().join("c.wav");
        write_raw(&p, 2, 16000, &[0; 100]);
        assert!(matches!(load_wav(&p, None), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"RIFX\x00\x00garbage that is not a wave file").unwrap();
        assert!(matches!(load_wav(&p, None), Err(Error::Format { .. })));
    }

    #[test]
    fn clip_rejects_out_of_range_samples() {
        assert!(AudioClip::new(vec![1.5], 16000, None).is_err());
        assert!(AudioClip::new(vec![0.5], 44100, None).is_err());
    }
}
