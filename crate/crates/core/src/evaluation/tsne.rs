//! Exact (O(N^2)) t-SNE into three dimensions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    /// Iterations run with exaggerated affinities and momentum 0.5.
    pub exaggeration_iters: usize,
    pub seed: u64,
    /// Tolerance on the perplexity reached by each point's bandwidth search.
    pub perplexity_tol: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
            perplexity_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// `N x 3`.
    pub points: Tensor,
    /// Perplexity reached by each point's conditional distribution.
    pub perplexities: Vec<f64>,
    /// KL(P || Q) of the initial layout, with un-exaggerated P.
    pub initial_kl: f64,
    pub final_kl: f64,
}

fn squared_distances(x: &[f64], n: usize, d: usize, exec: Exec) -> Vec<Vec<f64>> {
    exec.map_range(n, |i| {
        let xi = &x[i * d..(i + 1) * d];
        (0..n)
            .map(|j| {
                let xj = &x[j * d..(j + 1) * d];
                xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum()
            })
            .collect()
    })
}

/// Conditional distribution of row `i` at precision `beta`, and its
/// perplexity `exp(H)`.
fn conditional(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == i { 0.0 } else { (-beta * (v - min)).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    let mut h = 0.0;
    for (j, pj) in p.iter_mut().enumerate() {
        *pj /= sum;
        if j != i && *pj > 0.0 {
            h -= *pj * pj.ln();
        }
    }
    (p, h.exp())
}

/// Bisection on the Gaussian precision so that the row's perplexity hits
/// `target` within `tol`.
fn calibrate_row(dist: &[f64], i: usize, target: f64, tol: f64) -> (Vec<f64>, f64) {
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut beta = 1.0;
    let mut best = conditional(dist, i, beta);
    for _ in 0..500 {
        if (best.1 - target).abs() <= tol {
            break;
        }
        // perplexity falls as beta grows
        if best.1 > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        best = conditional(dist, i, beta);
    }
    best
}

fn kl(p: &[f64], q_num: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(q_num)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &qn)| p * (p / (qn / z).max(1e-300)).ln())
        .sum()
}

/// Student-t kernel matrix `1 / (1 + |yi - yj|^2)` (zero diagonal) and its
/// sum, accumulated in row order.
fn kernel(y: &[f64], n: usize, exec: Exec) -> (Vec<f64>, f64) {
    let rows = exec.map_range(n, |i| {
        let yi = &y[3 * i..3 * i + 3];
        (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    let yj = &y[3 * j..3 * j + 3];
                    let d2: f64 = (0..3).map(|k| (yi[k] - yj[k]) * (yi[k] - yj[k])).sum();
                    1.0 / (1.0 + d2)
                }
            })
            .collect::<Vec<f64>>()
    });
    let z = rows.iter().map(|r| r.iter().sum::<f64>()).sum();
    (rows.concat(), z)
}

/// Embeds the rows of `data` (`N x D`) in three dimensions. Results do not
/// depend on `exec`: rows are computed independently and reduced in index
/// order.
pub fn tsne_3d(data: &Tensor, cfg: &TsneConfig, exec: Exec) -> Result<TsneResult> {
    if data.shape().len() != 2 {
        return Err(Error::Input(format!("t-SNE input must be N x D, got {:?}", data.shape())));
    }
    if !data.all_finite() {
        return Err(Error::Input("t-SNE input contains non-finite values".into()));
    }
    let (n, d) = (data.dim0(), data.row_len());
    if (n as f64) <= 3.0 * cfg.perplexity {
        return Err(Error::Input(format!(
            "t-SNE needs more than {} points for perplexity {}, got {n}",
            3.0 * cfg.perplexity,
            cfg.perplexity
        )));
    }
    let dist = squared_distances(data.data(), n, d, exec);
    let rows = exec.map_range(n, |i| calibrate_row(&dist[i], i, cfg.perplexity, cfg.perplexity_tol));
    let perplexities: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((rows[i].0[j] + rows[j].0[i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    drop(rows);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<f64> = (0..n * 3).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; n * 3];
    let mut gains = vec![1.0f64; n * 3];
    let (num, z) = kernel(&y, n, exec);
    let initial_kl = kl(&p, &num, z);

    for iter in 0..cfg.iterations {
        let exaggerate = iter < cfg.exaggeration_iters;
        let ex = if exaggerate { cfg.exaggeration } else { 1.0 };
        let momentum = if exaggerate { 0.5 } else { 0.8 };
        let (num, z) = kernel(&y, n, exec);
        let grads = exec.map_range(n, |i| {
            let mut g = [0.0; 3];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let nij = num[i * n + j];
                let m = (ex * p[i * n + j] - nij / z) * nij;
                for k in 0..3 {
                    g[k] += 4.0 * m * (y[3 * i + k] - y[3 * j + k]);
                }
            }
            g
        });
        for (i, g) in grads.iter().enumerate() {
            for k in 0..3 {
                let idx = 3 * i + k;
                gains[idx] = if (g[k] > 0.0) != (update[idx] > 0.0) {
                    gains[idx] + 0.2
                } else {
                    (gains[idx] * 0.8).max(0.01)
                };
                update[idx] = momentum * update[idx] - cfg.learning_rate * gains[idx] * g[k];
                y[idx] += update[idx];
            }
        }
        for k in 0..3 {
            let mean = (0..n).map(|i| y[3 * i + k]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[3 * i + k] -= mean);
        }
    }
    let (num, z) = kernel(&y, n, exec);
    let final_kl = kl(&p, &num, z);
    Ok(TsneResult {
        points: Tensor::from_vec(&[n, 3], y)?,
        perplexities,
        initial_kl,
        final_kl,
    })
}

/// Mean silhouette coefficient under Euclidean distance; points alone in
/// their cluster score 0.
pub fn silhouette_score(points: &Tensor, labels: &[usize], exec: Exec) -> Result<f64> {
    let n = points.dim0();
    if labels.len() != n || n == 0 {
        return Err(Error::Input(format!("{n} points for {} labels", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Input("silhouette needs at least two clusters".into()));
    }
    let d = points.row_len();
    let x = points.data();
    let scores = exec.map_range(n, |i| {
        if sizes[labels[i]] < 2 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                let dist: f64 = (0..d).map(|t| (x[i * d + t] - x[j * d + t]).powi(2)).sum::<f64>().sqrt();
                sums[labels[j]] += dist;
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        (b - a) / a.max(b)
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}
