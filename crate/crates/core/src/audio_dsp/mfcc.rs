use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::exec::Exec;

use super::spectrum::PowerSpectrum;
use super::{
    frame_samples, mel_filterbank, AudioClip, MelFilterBank, FEATURE_DIM, FFT_SIZE, HOP_LEN,
    LOG_FLOOR, N_MELS, SAMPLE_RATE, WINDOW_LEN,
};

/// The flattened MFCC representation of one clip: exactly [`FEATURE_DIM`]
/// finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::Input(format!(
                "feature vector has {} values, expected {FEATURE_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature vector contains non-finite values".into()));
        }
        Ok(FeatureVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Orthonormal DCT-II matrix, row `k` holding basis vector `k`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    let s0 = (1.0 / n as f64).sqrt();
    let s = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let scale = if k == 0 { s0 } else { s };
        for i in 0..n {
            d[k * n + i] =
                scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    d
}

/// Frame, FFT, mel, log and DCT stages with their tables precomputed.
pub struct MfccExtractor {
    window: usize,
    hop: usize,
    spectrum: PowerSpectrum,
    filterbank: MelFilterBank,
    dct: Vec<f64>,
    feature_dim: usize,
}

impl MfccExtractor {
    pub fn new(
        window: usize,
        hop: usize,
        fft_size: usize,
        n_mels: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        Ok(MfccExtractor {
            window,
            hop,
            spectrum: PowerSpectrum::new(fft_size, window)?,
            filterbank: mel_filterbank(n_mels, fft_size, SAMPLE_RATE, 0.0, f64::from(SAMPLE_RATE) / 2.0)?,
            dct: dct_matrix(n_mels),
            feature_dim,
        })
    }

    /// 25 ms Hamming windows, 10 ms hop, 512-point FFT, 128 mel filters,
    /// first 1000 coefficients.
    pub fn standard() -> Self {
        Self::new(WINDOW_LEN, HOP_LEN, FFT_SIZE, N_MELS, FEATURE_DIM)
            .expect("standard MFCC configuration is valid")
    }

    pub fn filterbank(&self) -> &MelFilterBank {
        &self.filterbank
    }

    /// Per-frame cepstra, row-major `n_frames x n_mels`.
    pub fn cepstra(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let frames = frame_samples(samples, self.window, self.hop)?;
        let spec = self.spectrum.compute(&frames);
        let m = self.filterbank.n_filters();
        let mut out = vec![0.0; spec.n_frames() * m];
        let mut logmel = vec![0.0; m];
        for (row, cep) in spec.rows().zip(out.chunks_exact_mut(m)) {
            self.filterbank.apply(row, &mut logmel);
            logmel.iter_mut().for_each(|v| *v = (*v + LOG_FLOOR).ln());
            for (c, basis) in cep.iter_mut().zip(self.dct.chunks_exact(m)) {
                *c = basis.iter().zip(&logmel).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// Frame-major flattening of [`Self::cepstra`], truncated (or zero-padded)
    /// to the feature dimension.
    pub fn features(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let mut flat = self.cepstra(samples)?;
        flat.resize(self.feature_dim, 0.0);
        Ok(flat)
    }
}

fn standard_extractor() -> &'static MfccExtractor {
    static EXTRACTOR: OnceLock<MfccExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(MfccExtractor::standard)
}

pub fn mfcc_features(clip: &AudioClip) -> Result<FeatureVector> {
    FeatureVector::new(standard_extractor().features(clip.samples())?)
}

/// [`mfcc_features`] over many clips.
pub fn extract_features(clips: &[AudioClip], exec: Exec) -> Result<Vec<FeatureVector>> {
    exec.map(clips, mfcc_features).into_iter().collect()
}
