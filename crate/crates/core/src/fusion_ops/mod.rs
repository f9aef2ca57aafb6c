//! Differentiable building blocks of the fusion networks: CBAM channel and
//! spatial attention, compact bilinear pooling, 1-D to 2-D deconvolution and
//! sign binarization.
//!
//! Each operator works on a single sample and exposes a forward pass plus a
//! vector-Jacobian backward pass, so it can be checked against finite
//! differences without any training machinery. The batched graph in
//! [`crate::nn`] calls these same routines sample by sample.

mod binarize;
mod cbam;
mod cbp;
pub(crate) mod conv;
pub(crate) mod deconv;

pub use binarize::{binarize, binarize_backward};
pub use cbam::{
    channel_attention, channel_attention_backward, spatial_attention, spatial_attention_backward,
    ChannelAttentionCache, ChannelMlp, ChannelMlpGrad, ChannelMlpView, SpatialAttentionCache,
    SpatialConv, SpatialConvGrad, SpatialConvView,
};
pub use cbp::{CbpCache, CompactBilinear, SketchParams};
pub use deconv::{
    transposed_conv_backward, transposed_conv_forward, Deconv1dTo2d, DeconvCache, TransposedConv,
    TransposedConvGrad, DECONV_KERNEL, DECONV_STRIDE,
};

use crate::error::{Error, Result};

/// Channels-last `H x W x C` activation of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Input(format!(
                "{h}x{w}x{c} feature map needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(FeatureMap { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Multiplies every channel `c` by `weights[c]`.
    pub fn scale_channels(&self, weights: &[f64]) -> FeatureMap {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(self.c) {
            px.iter_mut().zip(weights).for_each(|(v, w)| *v *= w);
        }
        out
    }

    /// Multiplies every pixel's channel vector by `map[pixel]`.
    pub fn scale_spatial(&self, map: &[f64]) -> FeatureMap {
        let mut out = self.clone();
        for (px, m) in out.data.chunks_exact_mut(self.c).zip(map) {
            px.iter_mut().for_each(|v| *v *= m);
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    /// Central-difference gradient of `f` at `x`.
    pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut xs = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xs[i];
                xs[i] = orig + h;
                let fp = f(&xs);
                xs[i] = orig - h;
                let fm = f(&xs);
                xs[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Largest `|a - n| / max(|a|, |n|, 1e-6)` over the two gradients.
    pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}
