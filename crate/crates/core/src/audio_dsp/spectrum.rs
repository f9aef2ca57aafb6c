use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

use super::FrameMatrix;

/// One-sided power spectrum, row-major `n_frames x (fft_size / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    power: Vec<f64>,
    n_frames: usize,
    fft_size: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let b = self.n_bins();
        &self.power[i * b..(i + 1) * b]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.power.chunks_exact(self.n_bins())
    }
}

pub(crate) struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    fft_size: usize,
}

impl PowerSpectrum {
    pub(crate) fn new(fft_size: usize, window_len: usize) -> Result<Self> {
        if !fft_size.is_power_of_two() {
            return Err(Error::Config(format!("fft size {fft_size} is not a power of two")));
        }
        if fft_size < window_len {
            return Err(Error::Config(format!(
                "fft size {fft_size} is smaller than the {window_len}-sample window"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(PowerSpectrum { fft, fft_size })
    }

    pub(crate) fn compute(&self, frames: &FrameMatrix) -> Spectrogram {
        let n_bins = self.fft_size / 2 + 1;
        let mut power = Vec::with_capacity(frames.n_frames() * n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for frame in frames.frames() {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &s) in buf.iter_mut().zip(frame) {
                c.re = s;
            }
            self.fft.process(&mut buf);
            power.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
        }
        Spectrogram {
            power,
            n_frames: frames.n_frames(),
            fft_size: self.fft_size,
        }
    }
}

/// Zero-pads each frame to `fft_size` and returns the squared magnitude of
/// the non-negative-frequency DFT bins.
pub fn power_spectrum(frames: &FrameMatrix, fft_size: usize) -> Result<Spectrogram> {
    Ok(PowerSpectrum::new(fft_size, frames.window_len())?.compute(frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_dsp::frame_samples;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N^2) summation of the one-sided DFT power.
    fn dft_power(frame: &[f64], n: usize) -> Vec<f64> {
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn shape_and_zero_frame() {
        let frames = frame_samples(&vec![0.0; 16000], 400, 160).unwrap();
        let s = power_spectrum(&frames, 512).unwrap();
        assert_eq!((s.n_frames(), s.n_bins()), (98, 257));
        assert!(s.rows().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig: Vec<f64> = (0..1200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let frames = frame_samples(&sig, 400, 160).unwrap();
        let s = power_spectrum(&frames, 512).unwrap();
        for (i, frame) in frames.frames().enumerate() {
            let want = dft_power(frame, 512);
            for (a, b) in s.row(i).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sig: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let frames = frame_samples(&sig, 400, 160).unwrap();
        let s = power_spectrum(&frames, 512).unwrap();
        for (i, frame) in frames.frames().enumerate() {
            let time: f64 = frame.iter().map(|x| x * x).sum();
            let row = s.row(i);
            let two_sided = row[0] + row[256] + 2.0 * row[1..256].iter().sum::<f64>();
            assert!((time - two_sided / 512.0).abs() <= 1e-9 * time);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let frames = frame_samples(&[0.0; 400], 400, 160).unwrap();
        assert!(matches!(power_spectrum(&frames, 256), Err(Error::Config(_))));
        assert!(matches!(power_spectrum(&frames, 500), Err(Error::Config(_))));
    }
}
