use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, row-major `n_filters x (fft_size / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterBank {
    weights: Vec<f64>,
    n_filters: usize,
    n_bins: usize,
    /// `n_filters + 2` breakpoints in Hz; filter `k` peaks at `breakpoints[k + 1]`.
    breakpoints: Vec<f64>,
    bin_hz: f64,
}

impl MelFilterBank {
    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_bins..(k + 1) * self.n_bins]
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn centers(&self) -> &[f64] {
        &self.breakpoints[1..=self.n_filters]
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.bin_hz
    }

    /// Writes `sum_b power[b] * W[k][b]` for every filter into `out`.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (o, w) in out.iter_mut().zip(self.weights.chunks_exact(self.n_bins)) {
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

/// Builds `n_filters` triangles on `n_filters + 2` breakpoints equally spaced
/// in mel between `fmin` and `fmax`. Each triangle rises linearly from its
/// left breakpoint to 1 at its centre and falls back to 0 at its right
/// breakpoint; it is evaluated at the FFT bin frequencies `b * sr / fft_size`.
pub fn mel_filterbank(
    n_filters: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterBank> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if n_filters == 0 || fft_size < 2 {
        return Err(Error::Config("filterbank needs at least one filter and two fft points".into()));
    }
    if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Config(format!(
            "need 0 <= fmin < fmax <= {nyquist}, got fmin={fmin}, fmax={fmax}"
        )));
    }
    let n_bins = fft_size / 2 + 1;
    let bin_hz = f64::from(sample_rate) / fft_size as f64;
    let bins_in_band = (0..n_bins)
        .filter(|&b| {
            let f = b as f64 * bin_hz;
            f >= fmin && f <= fmax
        })
        .count();
    if bins_in_band < n_filters + 2 {
        return Err(Error::Config(format!(
            "{} breakpoints cannot be placed on the {bins_in_band} fft bins in [{fmin}, {fmax}] Hz",
            n_filters + 2
        )));
    }

    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let step = (mhi - mlo) / (n_filters + 1) as f64;
    let breakpoints: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mlo + step * i as f64))
        .collect();

    let mut weights = vec![0.0; n_filters * n_bins];
    for k in 0..n_filters {
        let (lo, c, hi) = (breakpoints[k], breakpoints[k + 1], breakpoints[k + 2]);
        let row = &mut weights[k * n_bins..(k + 1) * n_bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            *w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
        }
    }
    Ok(MelFilterBank {
        weights,
        n_filters,
        n_bins,
        breakpoints,
        bin_hz,
    })
}
