use crate::error::{Error, Result};

use super::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    pub window_ms: u32,
    pub hop_ms: u32,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            window_ms: 25,
            hop_ms: 10,
        }
    }
}

impl FrameConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (sample_rate as usize * self.hop_ms as usize) / 1000
    }
}

/// Hamming-windowed analysis frames, stored row-major `n_frames x window_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    data: Vec<f64>,
    n_frames: usize,
    window_len: usize,
    hop: usize,
}

impl FrameMatrix {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.window_len..(i + 1) * self.window_len]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.window_len)
    }
}

/// `floor((len - window) / hop) + 1`, or 0 when the signal is shorter than
/// one window.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window || hop == 0 {
        0
    } else {
        (len - window) / hop + 1
    }
}

pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

/// Frame `i` covers `samples[i * hop .. i * hop + window]`, multiplied by a
/// Hamming window.
pub fn frame_samples(samples: &[f64], window: usize, hop: usize) -> Result<FrameMatrix> {
    if window == 0 || hop == 0 {
        return Err(Error::Config("window and hop must be positive".into()));
    }
    if samples.len() < window {
        return Err(Error::InsufficientInput(format!(
            "{} samples is shorter than one {window}-sample window",
            samples.len()
        )));
    }
    let n_frames = frame_count(samples.len(), window, hop);
    let w = hamming_window(window);
    let mut data = Vec::with_capacity(n_frames * window);
    for i in 0..n_frames {
        let start = i * hop;
        data.extend(samples[start..start + window].iter().zip(&w).map(|(s, w)| s * w));
    }
    Ok(FrameMatrix {
        data,
        n_frames,
        window_len: window,
        hop,
    })
}

pub fn frame_signal(clip: &AudioClip, cfg: FrameConfig) -> Result<FrameMatrix> {
    let window = cfg.window_len(clip.sample_rate());
    let hop = cfg.hop_len(clip.sample_rate());
    frame_samples(clip.samples(), window, hop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_second_gives_98_frames() {
        let clip = AudioClip::new(vec![0.0; 16000], 16000, None).unwrap();
        let f = frame_signal(&clip, FrameConfig::default()).unwrap();
        assert_eq!(f.n_frames(), (16000 - 400) / 160 + 1);
        assert_eq!(f.n_frames(), 98);
        assert_eq!(f.window_len(), 400);
    }

    #[test]
    fn exactly_one_window() {
        let f = frame_samples(&[0.1; 400], 400, 160).unwrap();
        assert_eq!(f.n_frames(), 1);
        assert!(matches!(
            frame_samples(&[0.1; 399], 400, 160),
            Err(Error::InsufficientInput(_))
        ));
    }

    #[test]
    fn constant_signal_frames_are_scaled_window() {
        let c = 0.3;
        let f = frame_samples(&vec![c; 2000], 400, 160).unwrap();
        let w = hamming_window(400);
        for frame in f.frames() {
            for (a, b) in frame.iter().zip(&w) {
                assert_eq!(*a, c * b);
            }
        }
    }

    #[test]
    fn frames_are_contiguous_slices() {
        let sig: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let f = frame_samples(&sig, 400, 160).unwrap();
        let w = hamming_window(400);
        let i = 2;
        for j in 0..400 {
            assert_eq!(f.frame(i)[j], sig[i * 160 + j] * w[j]);
        }
    }

    proptest! {
        #[test]
        fn frame_count_law(len in 400usize..20000) {
            let f = frame_samples(&vec![0.0; len], 400, 160).unwrap();
            prop_assert_eq!(f.n_frames(), (len - 400) / 160 + 1);
            // last frame fits, one more would not
            prop_assert!((f.n_frames() - 1) * 160 + 400 <= len);
            prop_assert!(f.n_frames() * 160 + 400 > len);
        }
    }
}
