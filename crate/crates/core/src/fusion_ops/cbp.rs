//! Compact bilinear pooling: the outer product of two vectors approximated
//! by the circular convolution of their count sketches, computed in the
//! Fourier domain, then signed square root and L2 normalisation.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frozen hash buckets and signs for both inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchParams {
    pub d: usize,
    pub h1: Vec<usize>,
    pub s1: Vec<i8>,
    pub h2: Vec<usize>,
    pub s2: Vec<i8>,
    pub seed: u64,
}

impl SketchParams {
    /// Draws `h ~ U[0, d)` and `s ~ U{-1, +1}` independently for each index.
    pub fn draw(n1: usize, n2: usize, d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("sketch dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> (Vec<usize>, Vec<i8>) {
            let h = (0..n).map(|_| rng.gen_range(0..d)).collect();
            let s = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            (h, s)
        };
        let (h1, s1) = draw(n1);
        let (h2, s2) = draw(n2);
        Ok(SketchParams { d, h1, s1, h2, s2, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("sketch dimension must be positive".into()));
        }
        let ok = self.h1.len() == self.s1.len()
            && self.h2.len() == self.s2.len()
            && self.h1.iter().chain(&self.h2).all(|&h| h < self.d)
            && self.s1.iter().chain(&self.s2).all(|&s| s == 1 || s == -1);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("malformed sketch parameters".into()))
        }
    }
}

/// Sketch parameters bound to FFT plans of length `d`.
#[derive(Clone)]
pub struct CompactBilinear {
    params: SketchParams,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for CompactBilinear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompactBilinear").field("d", &self.params.d).finish()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CbpCache {
    raw: Vec<f64>,
    signed: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
}

impl CbpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
}

fn scatter(x: &[f64], h: &[usize], s: &[i8], d: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); d];
    for ((&v, &b), &sg) in x.iter().zip(h).zip(s) {
        out[b].re += f64::from(sg) * v;
    }
    out
}

impl CompactBilinear {
    pub fn new(params: SketchParams) -> Result<Self> {
        params.validate()?;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(params.d);
        let ifft = planner.plan_fft_inverse(params.d);
        Ok(CompactBilinear { params, fft, ifft })
    }

    pub fn params(&self) -> &SketchParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.d
    }

    fn check(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.params.h1.len() || y.len() != self.params.h2.len() {
            return Err(Error::Input(format!(
                "sketch built for inputs of length ({}, {}), got ({}, {})",
                self.params.h1.len(),
                self.params.h2.len(),
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    fn spectra(&self, x: &[f64], y: &[f64]) -> (Vec<Complex<f64>>, Vec<Complex<f64>>) {
        let p = &self.params;
        let mut a = scatter(x, &p.h1, &p.s1, p.d);
        let mut b = scatter(y, &p.h2, &p.s2, p.d);
        self.fft.process(&mut a);
        self.fft.process(&mut b);
        (a, b)
    }

    fn inverse_real(&self, mut spec: Vec<Complex<f64>>) -> Vec<f64> {
        self.ifft.process(&mut spec);
        let inv = 1.0 / self.params.d as f64;
        spec.into_iter().map(|c| c.re * inv).collect()
    }

    /// The sketch of `x ⊗ y` before any normalisation: the circular
    /// convolution of the two count sketches.
    pub fn raw(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check(x, y)?;
        let (a, b) = self.spectra(x, y);
        let mut raw = self.inverse_real(a.iter().zip(&b).map(|(p, q)| p * q).collect());
        // entries at FFT round-off level are structural zeros; snapping them
        // keeps the signed square root away from its infinite slope
        let l1 = |v: &[f64]| v.iter().map(|e| e.abs()).sum::<f64>();
        let tol = 1e-12 * l1(x) * l1(y);
        raw.iter_mut().filter(|v| v.abs() <= tol).for_each(|v| *v = 0.0);
        Ok(raw)
    }

    pub fn forward(&self, x: &[f64], y: &[f64]) -> Result<CbpCache> {
        let raw = self.raw(x, y)?;
        let signed: Vec<f64> = raw.iter().map(|&v| v.signum() * v.abs().sqrt()).collect();
        let norm = signed.iter().map(|v| v * v).sum::<f64>().sqrt();
        let output = if norm > 0.0 {
            signed.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; signed.len()]
        };
        Ok(CbpCache {
            raw,
            signed,
            norm,
            output,
        })
    }

    /// Signed-square-rooted, L2-normalised pooling of `x` and `y`. The zero
    /// vector normalises to itself.
    pub fn pool(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, y)?.output)
    }

    /// Gradients with respect to `x` and `y` given the gradient of the pooled
    /// output. At `raw = 0` the signed square root contributes zero gradient.
    pub fn backward(&self, x: &[f64], y: &[f64], cache: &CbpCache, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let d = p.d;
        let mut g_signed = vec![0.0; d];
        if cache.norm > 0.0 {
            let dot: f64 = cache.output.iter().zip(grad).map(|(a, b)| a * b).sum();
            for i in 0..d {
                g_signed[i] = (grad[i] - cache.output[i] * dot) / cache.norm;
            }
        }
        let mut g_raw: Vec<Complex<f64>> = (0..d)
            .map(|i| {
                let s = cache.signed[i].abs();
                let g = if s > 0.0 { g_signed[i] / (2.0 * s) } else { 0.0 };
                Complex::new(g, 0.0)
            })
            .collect();
        self.fft.process(&mut g_raw);
        let (a, b) = self.spectra(x, y);
        let ga = self.inverse_real(g_raw.iter().zip(&b).map(|(g, q)| g * q.conj()).collect());
        let gb = self.inverse_real(g_raw.iter().zip(&a).map(|(g, q)| g * q.conj()).collect());
        let gx = p.h1.iter().zip(&p.s1).map(|(&h, &s)| f64::from(s) * ga[h]).collect();
        let gy = p.h2.iter().zip(&p.s2).map(|(&h, &s)| f64::from(s) * gb[h]).collect();
        (gx, gy)
    }
}
