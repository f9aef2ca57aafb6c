//! Convolutional block attention: a channel gate computed from spatially
//! pooled descriptors, followed by a spatial gate computed from
//! channel-pooled descriptors.

use rand::Rng;

use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::{sigmoid, FeatureMap};
use crate::error::{Error, Result};

/// Parameters of the shared two-layer channel MLP. `w1` is `c x hidden`,
/// `w2` is `hidden x c`, both row-major.
#[derive(Debug, Clone, Copy)]
pub struct ChannelMlpView<'a> {
    pub c: usize,
    pub hidden: usize,
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMlp {
    pub c: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ChannelMlp {
    /// He-uniform weights, zero biases. `c` must be divisible by `ratio`.
    pub fn new(c: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = reduced_width(c, ratio)?;
        let l1 = (6.0 / c as f64).sqrt();
        let l2 = (6.0 / hidden as f64).sqrt();
        Ok(ChannelMlp {
            c,
            hidden,
            w1: (0..c * hidden).map(|_| rng.gen_range(-l1..l1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden * c).map(|_| rng.gen_range(-l2..l2)).collect(),
            b2: vec![0.0; c],
        })
    }

    pub fn view(&self) -> ChannelMlpView<'_> {
        ChannelMlpView {
            c: self.c,
            hidden: self.hidden,
            w1: &self.w1,
            b1: &self.b1,
            w2: &self.w2,
            b2: &self.b2,
        }
    }
}

pub(crate) fn reduced_width(c: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || c == 0 || c % ratio != 0 {
        return Err(Error::Config(format!(
            "channel count {c} is not divisible by reduction ratio {ratio}"
        )));
    }
    Ok(c / ratio)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ChannelMlpGrad {
    fn zeros(c: usize, hidden: usize) -> Self {
        ChannelMlpGrad {
            w1: vec![0.0; c * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * c],
            b2: vec![0.0; c],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChannelAttentionCache {
    avg: Vec<f64>,
    max: Vec<f64>,
    argmax: Vec<usize>,
    weights: Vec<f64>,
}

impl ChannelAttentionCache {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn mlp_hidden(v: &[f64], p: &ChannelMlpView) -> Vec<f64> {
    let mut a = p.b1.to_vec();
    for (ci, &vc) in v.iter().enumerate() {
        let row = &p.w1[ci * p.hidden..(ci + 1) * p.hidden];
        a.iter_mut().zip(row).for_each(|(a, w)| *a += vc * w);
    }
    a
}

fn mlp_out(hidden_pre: &[f64], p: &ChannelMlpView, out: &mut [f64]) {
    for (j, &a) in hidden_pre.iter().enumerate() {
        let r = a.max(0.0);
        if r == 0.0 {
            continue;
        }
        let row = &p.w2[j * p.c..(j + 1) * p.c];
        out.iter_mut().zip(row).for_each(|(o, w)| *o += r * w);
    }
}

/// `sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))`, one weight per channel.
pub fn channel_attention(x: &FeatureMap, p: ChannelMlpView) -> Result<ChannelAttentionCache> {
    if x.c != p.c {
        return Err(Error::Input(format!(
            "channel attention built for {} channels, got {}",
            p.c, x.c
        )));
    }
    if x.pixels() == 0 {
        return Err(Error::Input("empty feature map".into()));
    }
    let c = x.c;
    let mut avg = vec![0.0; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    let mut argmax = vec![0; c];
    for (i, px) in x.data.chunks_exact(c).enumerate() {
        for ch in 0..c {
            avg[ch] += px[ch];
            if px[ch] > max[ch] {
                max[ch] = px[ch];
                argmax[ch] = i;
            }
        }
    }
    let n = x.pixels() as f64;
    avg.iter_mut().for_each(|v| *v /= n);

    let mut z = vec![0.0; c];
    for v in [&avg, &max] {
        z.iter_mut().zip(p.b2).for_each(|(z, b)| *z += b);
        mlp_out(&mlp_hidden(v, &p), &p, &mut z);
    }
    let weights = z.into_iter().map(sigmoid).collect();
    Ok(ChannelAttentionCache {
        avg,
        max,
        argmax,
        weights,
    })
}

/// Backpropagates `grad` (one value per channel weight) to the input map
/// and the MLP parameters.
pub fn channel_attention_backward(
    x: &FeatureMap,
    p: ChannelMlpView,
    cache: &ChannelAttentionCache,
    grad: &[f64],
) -> (FeatureMap, ChannelMlpGrad) {
    let (c, hd) = (p.c, p.hidden);
    let gz: Vec<f64> = grad
        .iter()
        .zip(&cache.weights)
        .map(|(g, w)| g * w * (1.0 - w))
        .collect();
    let mut pg = ChannelMlpGrad::zeros(c, hd);
    let mut gx = FeatureMap::zeros(x.h, x.w, c);
    for (branch, v) in [&cache.avg, &cache.max].into_iter().enumerate() {
        pg.b2.iter_mut().zip(&gz).for_each(|(a, g)| *a += g);
        let a = mlp_hidden(v, &p);
        let mut ga = vec![0.0; hd];
        for j in 0..hd {
            if a[j] <= 0.0 {
                continue;
            }
            let w2row = &p.w2[j * c..(j + 1) * c];
            let gw2row = &mut pg.w2[j * c..(j + 1) * c];
            let mut s = 0.0;
            for ch in 0..c {
                gw2row[ch] += a[j] * gz[ch];
                s += w2row[ch] * gz[ch];
            }
            ga[j] = s;
        }
        pg.b1.iter_mut().zip(&ga).for_each(|(b, g)| *b += g);
        let mut gv = vec![0.0; c];
        for ch in 0..c {
            let w1row = &p.w1[ch * hd..(ch + 1) * hd];
            let gw1row = &mut pg.w1[ch * hd..(ch + 1) * hd];
            for j in 0..hd {
                gw1row[j] += v[ch] * ga[j];
                gv[ch] += w1row[j] * ga[j];
            }
        }
        if branch == 0 {
            let n = x.pixels() as f64;
            for px in gx.data.chunks_exact_mut(c) {
                px.iter_mut().zip(&gv).for_each(|(g, v)| *g += v / n);
            }
        } else {
            for ch in 0..c {
                gx.data[cache.argmax[ch] * c + ch] += gv[ch];
            }
        }
    }
    (gx, pg)
}

/// Spatial gate convolution: `k x k` kernel over the two pooled planes
/// (`[ky][kx][plane]`) and a scalar bias.
#[derive(Debug, Clone, Copy)]
pub struct SpatialConvView<'a> {
    pub k: usize,
    pub w: &'a [f64],
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConv {
    pub k: usize,
    pub w: Vec<f64>,
    pub b: f64,
}

impl SpatialConv {
    pub fn new(k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("spatial kernel {k} must be odd")));
        }
        let l = (6.0 / (k * k * 2) as f64).sqrt();
        Ok(SpatialConv {
            k,
            w: (0..k * k * 2).map(|_| rng.gen_range(-l..l)).collect(),
            b: 0.0,
        })
    }

    pub fn view(&self) -> SpatialConvView<'_> {
        SpatialConvView {
            k: self.k,
            w: &self.w,
            b: self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConvGrad {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub struct SpatialAttentionCache {
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    map: Vec<f64>,
}

impl SpatialAttentionCache {
    /// The `H x W` gate.
    pub fn map(&self) -> &[f64] {
        &self.map
    }
}

fn spatial_geom(x: &FeatureMap, k: usize) -> ConvGeom {
    ConvGeom {
        batch: 1,
        h: x.h,
        w: x.w,
        cin: 2,
        cout: 1,
        k,
    }
}

/// `sigmoid(conv_kxk([avgpool_c(x), maxpool_c(x)]))` with same padding.
pub fn spatial_attention(x: &FeatureMap, p: SpatialConvView) -> Result<SpatialAttentionCache> {
    if x.h == 0 || x.w == 0 || x.c == 0 {
        return Err(Error::Input("empty feature map".into()));
    }
    if p.w.len() != p.k * p.k * 2 {
        return Err(Error::Config("spatial kernel has wrong size".into()));
    }
    let mut pooled = Vec::with_capacity(x.pixels() * 2);
    let mut argmax = Vec::with_capacity(x.pixels());
    for px in x.data.chunks_exact(x.c) {
        let mean = px.iter().sum::<f64>() / x.c as f64;
        let (mut mi, mut mv) = (0, px[0]);
        for (i, &v) in px.iter().enumerate().skip(1) {
            if v > mv {
                mi = i;
                mv = v;
            }
        }
        pooled.push(mean);
        pooled.push(mv);
        argmax.push(mi);
    }
    let pre = conv_forward(&pooled, p.w, &[p.b], spatial_geom(x, p.k));
    Ok(SpatialAttentionCache {
        pooled,
        argmax,
        map: pre.into_iter().map(sigmoid).collect(),
    })
}

pub fn spatial_attention_backward(
    x: &FeatureMap,
    p: SpatialConvView,
    cache: &SpatialAttentionCache,
    grad: &[f64],
) -> (FeatureMap, SpatialConvGrad) {
    let gpre: Vec<f64> = grad
        .iter()
        .zip(&cache.map)
        .map(|(g, m)| g * m * (1.0 - m))
        .collect();
    let cg = conv_backward(&cache.pooled, p.w, &gpre, spatial_geom(x, p.k), true);
    let gpooled = cg.dx.expect("requested");
    let mut gx = FeatureMap::zeros(x.h, x.w, x.c);
    let inv_c = 1.0 / x.c as f64;
    for (i, px) in gx.data.chunks_exact_mut(x.c).enumerate() {
        let (ga, gm) = (gpooled[2 * i], gpooled[2 * i + 1]);
        px.iter_mut().for_each(|v| *v += ga * inv_c);
        px[cache.argmax[i]] += gm;
    }
    (
        gx,
        SpatialConvGrad {
            w: cg.dw,
            b: cg.db[0],
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion_ops::testutil::{max_rel_error, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn channel_weights_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = ChannelMlp::new(16, 8, &mut rng).unwrap();
        let x = random_map(5, 5, 16, 2);
        let cache = channel_attention(&x, mlp.view()).unwrap();
        assert_eq!(cache.weights().len(), 16);
        assert!(cache.weights().iter().all(|&w| w > 0.0 && w < 1.0));
    }

    #[test]
    fn zero_input_zero_bias_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = ChannelMlp::new(8, 8, &mut rng).unwrap();
        let x = FeatureMap::zeros(3, 3, 8);
        let cache = channel_attention(&x, mlp.view()).unwrap();
        assert!(cache.weights().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn ratio_must_divide_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(ChannelMlp::new(12, 8, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn channel_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mlp = ChannelMlp::new(8, 2, &mut rng).unwrap();
        mlp.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        mlp.b2.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        let x = random_map(4, 4, 8, 12);
        let proj: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &FeatureMap, m: &ChannelMlp| -> f64 {
            let c = channel_attention(x, m.view()).unwrap();
            c.weights().iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let cache = channel_attention(&x, mlp.view()).unwrap();
        let (gx, pg) = channel_attention_backward(&x, mlp.view(), &cache, &proj);
        let nx = numeric_grad(&x.data, |d| loss(&FeatureMap::new(4, 4, 8, d.to_vec()).unwrap(), &mlp));
        assert!(max_rel_error(&gx.data, &nx) < 1e-4);
        let nw1 = numeric_grad(&mlp.w1, |w| {
            let mut m = mlp.clone();
            m.w1 = w.to_vec();
            loss(&x, &m)
        });
        assert!(max_rel_error(&pg.w1, &nw1) < 1e-4);
        let nb2 = numeric_grad(&mlp.b2, |b| {
            let mut m = mlp.clone();
            m.b2 = b.to_vec();
            loss(&x, &m)
        });
        assert!(max_rel_error(&pg.b2, &nb2) < 1e-4);
    }

    #[test]
    fn spatial_map_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = SpatialConv::new(7, &mut rng).unwrap();
        for c in [1, 3, 16] {
            let x = random_map(6, 5, c, c as u64);
            let cache = spatial_attention(&x, conv.view()).unwrap();
            assert_eq!(cache.map().len(), 30);
            assert!(cache.map().iter().all(|&m| m > 0.0 && m < 1.0));
        }
    }

    #[test]
    fn spatial_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut conv = SpatialConv::new(7, &mut rng).unwrap();
        conv.b = 0.05;
        let x = random_map(4, 4, 8, 22);
        let proj: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &FeatureMap, cv: &SpatialConv| -> f64 {
            let c = spatial_attention(x, cv.view()).unwrap();
            c.map().iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let cache = spatial_attention(&x, conv.view()).unwrap();
        let (gx, pg) = spatial_attention_backward(&x, conv.view(), &cache, &proj);
        let nx = numeric_grad(&x.data, |d| loss(&FeatureMap::new(4, 4, 8, d.to_vec()).unwrap(), &conv));
        assert!(max_rel_error(&gx.data, &nx) < 1e-4);
        let nw = numeric_grad(&conv.w, |w| {
            let mut c = conv.clone();
            c.w = w.to_vec();
            loss(&x, &c)
        });
        assert!(max_rel_error(&pg.w, &nw) < 1e-4);
    }

    #[test]
    fn gating_preserves_shape() {
        let x = random_map(3, 4, 5, 9);
        let w = [0.5, 1.0, 0.0, 2.0, 1.5];
        let y = x.scale_channels(&w);
        assert_eq!((y.h, y.w, y.c), (3, 4, 5));
        for (i, v) in y.data.iter().enumerate() {
            assert_eq!(*v, x.data[i] * w[i % 5]);
        }
    }
}
