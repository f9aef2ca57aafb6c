//! Transposed convolution (kernel 4, stride 2, padding 1), which exactly
//! doubles both spatial dimensions, and the 1-D to 2-D lifting built on it.
//!
//! Weights are laid out `[cin][ky][kx][cout]`. Output pixel `(oy, ox)`
//! receives input pixel `(iy, ix)` through kernel tap `(ky, kx)` when
//! `oy = 2 * iy - 1 + ky` and `ox = 2 * ix - 1 + kx`.

use rand::Rng;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::gemm;

pub const DECONV_KERNEL: usize = 4;
pub const DECONV_STRIDE: usize = 2;
const PAD: isize = 1;

#[derive(Debug, Clone, Copy)]
pub(crate) struct DeconvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

impl DeconvGeom {
    fn taps(&self) -> usize {
        DECONV_KERNEL * DECONV_KERNEL * self.cout
    }
}

/// Batched forward over channels-last input `batch x h x w x cin`.
pub(crate) fn deconv_forward(x: &[f64], weight: &[f64], bias: &[f64], g: DeconvGeom) -> Vec<f64> {
    let rows = g.batch * g.h * g.w;
    let taps = g.taps();
    let mut cols = vec![0.0; rows * taps];
    gemm(rows, g.cin, taps, x, false, weight, false, &mut cols, false);
    let (oh, ow) = (2 * g.h, 2 * g.w);
    let mut y = vec![0.0; g.batch * oh * ow * g.cout];
    Exec::default().for_chunks_mut(&mut y, oh * ow * g.cout, |n, out| {
        for px in out.chunks_exact_mut(g.cout) {
            px.copy_from_slice(bias);
        }
        for iy in 0..g.h {
            for ix in 0..g.w {
                let row = &cols[((n * g.h + iy) * g.w + ix) * taps..][..taps];
                for ky in 0..DECONV_KERNEL {
                    let oy = 2 * iy as isize - PAD + ky as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..DECONV_KERNEL {
                        let ox = 2 * ix as isize - PAD + kx as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let dst = &mut out[((oy as usize) * ow + ox as usize) * g.cout..][..g.cout];
                        let src = &row[(ky * DECONV_KERNEL + kx) * g.cout..][..g.cout];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    });
    y
}

pub(crate) struct DeconvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn deconv_backward(x: &[f64], weight: &[f64], grad: &[f64], g: DeconvGeom, need_dx: bool) -> DeconvGrads {
    let rows = g.batch * g.h * g.w;
    let taps = g.taps();
    let (oh, ow) = (2 * g.h, 2 * g.w);
    let mut gcols = vec![0.0; rows * taps];
    Exec::default().for_chunks_mut(&mut gcols, g.h * g.w * taps, |n, cols| {
        let gs = &grad[n * oh * ow * g.cout..(n + 1) * oh * ow * g.cout];
        for iy in 0..g.h {
            for ix in 0..g.w {
                let row = &mut cols[(iy * g.w + ix) * taps..][..taps];
                for ky in 0..DECONV_KERNEL {
                    let oy = 2 * iy as isize - PAD + ky as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..DECONV_KERNEL {
                        let ox = 2 * ix as isize - PAD + kx as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let src = &gs[((oy as usize) * ow + ox as usize) * g.cout..][..g.cout];
                        row[(ky * DECONV_KERNEL + kx) * g.cout..][..g.cout].copy_from_slice(src);
                    }
                }
            }
        }
    });
    let mut dw = vec![0.0; g.cin * taps];
    gemm(g.cin, rows, taps, x, true, &gcols, false, &mut dw, false);
    let mut db = vec![0.0; g.cout];
    for px in grad.chunks_exact(g.cout) {
        db.iter_mut().zip(px).for_each(|(a, b)| *a += b);
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; rows * g.cin];
        gemm(rows, taps, g.cin, &gcols, false, weight, true, &mut dx, false);
        dx
    });
    DeconvGrads { dx, dw, db }
}

/// One transposed-convolution layer with owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConv {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TransposedConv {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * DECONV_KERNEL * DECONV_KERNEL;
        let l = (6.0 / fan_in as f64).sqrt();
        TransposedConv {
            cin,
            cout,
            weight: (0..cin * DECONV_KERNEL * DECONV_KERNEL * cout)
                .map(|_| rng.gen_range(-l..l))
                .collect(),
            bias: vec![0.0; cout],
        }
    }

    pub fn zeroed(cin: usize, cout: usize) -> Self {
        TransposedConv {
            cin,
            cout,
            weight: vec![0.0; cin * DECONV_KERNEL * DECONV_KERNEL * cout],
            bias: vec![0.0; cout],
        }
    }
}

pub fn transposed_conv_forward(x: &FeatureMap, layer: &TransposedConv) -> Result<FeatureMap> {
    if x.c != layer.cin {
        return Err(Error::Input(format!(
            "transposed conv expects {} channels, got {}",
            layer.cin, x.c
        )));
    }
    let g = DeconvGeom {
        batch: 1,
        h: x.h,
        w: x.w,
        cin: x.c,
        cout: layer.cout,
    };
    let data = deconv_forward(&x.data, &layer.weight, &layer.bias, g);
    FeatureMap::new(2 * x.h, 2 * x.w, layer.cout, data)
}

pub fn transposed_conv_backward(
    x: &FeatureMap,
    layer: &TransposedConv,
    grad: &FeatureMap,
) -> (FeatureMap, TransposedConvGrad) {
    let g = DeconvGeom {
        batch: 1,
        h: x.h,
        w: x.w,
        cin: x.c,
        cout: layer.cout,
    };
    let gr = deconv_backward(&x.data, &layer.weight, &grad.data, g, true);
    (
        FeatureMap {
            h: x.h,
            w: x.w,
            c: x.c,
            data: gr.dx.expect("requested"),
        },
        TransposedConvGrad {
            weight: gr.dw,
            bias: gr.db,
        },
    )
}

/// Reshapes a vector to a seed grid and doubles it with transposed
/// convolutions (ReLU between layers) until it reaches the target size.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv1dTo2d {
    pub seed_grid: (usize, usize, usize),
    pub target: (usize, usize, usize),
    pub layers: Vec<TransposedConv>,
}

/// Number of doublings taking `(h0, w0)` to `(h, w)`.
pub(crate) fn doublings(seed: (usize, usize), target: (usize, usize)) -> Result<usize> {
    let (mut h, mut w) = seed;
    let mut n = 0;
    while h < target.0 && w < target.1 {
        h *= 2;
        w *= 2;
        n += 1;
    }
    if n == 0 || h != target.0 || w != target.1 || seed.0 == 0 || seed.1 == 0 {
        return Err(Error::Config(format!(
            "{}x{} is not reachable by doubling {}x{}",
            target.0, target.1, seed.0, seed.1
        )));
    }
    Ok(n)
}

#[derive(Debug, Clone)]
pub struct DeconvCache {
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
}

impl Deconv1dTo2d {
    /// Layer `i` maps `c0` (first layer) or `C` channels to `C`.
    pub fn new(
        seed_grid: (usize, usize, usize),
        target: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = doublings((seed_grid.0, seed_grid.1), (target.0, target.1))?;
        let layers = (0..n)
            .map(|i| TransposedConv::new(if i == 0 { seed_grid.2 } else { target.2 }, target.2, rng))
            .collect();
        Ok(Deconv1dTo2d {
            seed_grid,
            target,
            layers,
        })
    }

    pub fn input_len(&self) -> usize {
        self.seed_grid.0 * self.seed_grid.1 * self.seed_grid.2
    }

    pub fn forward(&self, v: &[f64]) -> Result<(FeatureMap, DeconvCache)> {
        if v.len() != self.input_len() {
            return Err(Error::Input(format!(
                "vector of length {} cannot be reshaped to {:?}",
                v.len(),
                self.seed_grid
            )));
        }
        let (h0, w0, c0) = self.seed_grid;
        let mut x = FeatureMap::new(h0, w0, c0, v.to_vec())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let y = transposed_conv_forward(&x, layer)?;
            inputs.push(x);
            let last = i + 1 == self.layers.len();
            x = if last {
                y.clone()
            } else {
                let mut r = y.clone();
                r.data.iter_mut().for_each(|v| *v = v.max(0.0));
                r
            };
            pre.push(y);
        }
        Ok((x, DeconvCache { inputs, pre }))
    }

    pub fn backward(&self, cache: &DeconvCache, grad: &FeatureMap) -> (Vec<f64>, Vec<TransposedConvGrad>) {
        let mut g = grad.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i + 1 != self.layers.len() {
                for (gv, p) in g.data.iter_mut().zip(&cache.pre[i].data) {
                    if *p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let (gx, lg) = transposed_conv_backward(&cache.inputs[i], &self.layers[i], &g);
            grads.push(lg);
            g = gx;
        }
        grads.reverse();
        (g.data, grads)
    }
}
