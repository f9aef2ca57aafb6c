//! Stride-1 "same" convolution via im2col + GEMM over channels-last batches.
//! Weights are laid out `[ky][kx][cin][cout]`, i.e. a `(k*k*cin) x cout`
//! matrix.

use crate::exec::Exec;
use crate::tensor::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.h * self.w
    }
}

pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let per_sample = g.h * g.w * patch;
    let pad = (g.k / 2) as isize;
    let mut cols = vec![0.0; g.rows() * patch];
    Exec::default().for_chunks_mut(&mut cols, per_sample, |n, out| {
        let xs = &x[n * g.h * g.w * g.cin..(n + 1) * g.h * g.w * g.cin];
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = &mut out[(y * g.w + xx) * patch..(y * g.w + xx + 1) * patch];
                for ky in 0..g.k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = (ky * g.k + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&xs[src..src + g.cin]);
                    }
                }
            }
        }
    });
    cols
}

pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let pad = (g.k / 2) as isize;
    let mut x = vec![0.0; g.batch * g.h * g.w * g.cin];
    Exec::default().for_chunks_mut(&mut x, g.h * g.w * g.cin, |n, xs| {
        let cs = &cols[n * g.h * g.w * patch..(n + 1) * g.h * g.w * patch];
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = &cs[(y * g.w + xx) * patch..(y * g.w + xx + 1) * patch];
                for ky in 0..g.k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let src = (ky * g.k + kx) * g.cin;
                        for c in 0..g.cin {
                            xs[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    });
    x
}

pub(crate) fn conv_forward(x: &[f64], weight: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let mut y = vec![0.0; g.rows() * g.cout];
    for row in y.chunks_exact_mut(g.cout) {
        row.copy_from_slice(bias);
    }
    gemm(g.rows(), g.patch(), g.cout, &cols, false, weight, false, &mut y, true);
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv_backward(x: &[f64], weight: &[f64], grad: &[f64], g: ConvGeom, need_dx: bool) -> ConvGrads {
    let cols = im2col(x, g);
    let mut dw = vec![0.0; g.patch() * g.cout];
    gemm(g.patch(), g.rows(), g.cout, &cols, true, grad, false, &mut dw, false);
    drop(cols);
    let mut db = vec![0.0; g.cout];
    for row in grad.chunks_exact(g.cout) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; g.rows() * g.patch()];
        gemm(g.rows(), g.cout, g.patch(), grad, false, weight, true, &mut dcols, false);
        col2im(&dcols, g)
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion_ops::testutil::{max_rel_error, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &[f64], w: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
        let p = (g.k / 2) as isize;
        let mut y = vec![0.0; g.rows() * g.cout];
        for n in 0..g.batch {
            for oy in 0..g.h {
                for ox in 0..g.w {
                    for co in 0..g.cout {
                        let mut s = b[co];
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = oy as isize + ky as isize - p;
                                let ix = ox as isize + kx as isize - p;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x[((n * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci];
                                    s += xv * w[((ky * g.k + kx) * g.cin + ci) * g.cout + co];
                                }
                            }
                        }
                        y[((n * g.h + oy) * g.w + ox) * g.cout + co] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_loops_and_gradients_check() {
        let g = ConvGeom { batch: 2, h: 5, w: 4, cin: 3, cout: 2, k: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = r(2 * 5 * 4 * 3);
        let w = r(9 * 3 * 2);
        let b = r(2);
        let proj = r(2 * 5 * 4 * 2);
        let y = conv_forward(&x, &w, &b, g);
        for (a, c) in y.iter().zip(naive(&x, &w, &b, g)) {
            assert!((a - c).abs() < 1e-12);
        }
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            conv_forward(x, w, &b, g).iter().zip(&proj).map(|(a, p)| a * p).sum()
        };
        let gr = conv_backward(&x, &w, &proj, g, true);
        assert!(max_rel_error(gr.dx.as_ref().unwrap(), &numeric_grad(&x, |x| loss(x, &w))) < 1e-6);
        assert!(max_rel_error(&gr.dw, &numeric_grad(&w, |w| loss(&x, w))) < 1e-6);
        let db: Vec<f64> = (0..2).map(|c| proj.iter().skip(c).step_by(2).sum()).collect();
        assert!(max_rel_error(&gr.db, &db) < 1e-12);
    }
}
