//! Recorded forward pass with reverse-mode gradients.
//!
//! Tensors are channels-last and batch-first: images `B x H x W x C`,
//! vectors `B x N`. Each builder method evaluates its op eagerly, appends a
//! node and returns its id; [`Graph::backward`] then walks the tape in
//! reverse and accumulates parameter gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, BN_EPS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion_ops::conv::{conv_backward, conv_forward, ConvGeom};
use crate::fusion_ops::{
    binarize, binarize_backward, channel_attention, channel_attention_backward, spatial_attention,
    spatial_attention_backward, CbpCache, ChannelAttentionCache, ChannelMlpView, CompactBilinear,
    FeatureMap, SpatialAttentionCache, SpatialConvView,
};
use crate::fusion_ops::deconv::{deconv_backward, deconv_forward, DeconvGeom};
use crate::tensor::{gemm, Tensor};

pub type NodeId = usize;

enum Op {
    Input,
    Param(ParamId),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    Deconv { x: NodeId, w: NodeId, b: NodeId, geom: DeconvGeom },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu { x: NodeId },
    Binarize { x: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    Reshape { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    ChannelAttention { x: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId, caches: Vec<ChannelAttentionCache> },
    SpatialAttention { x: NodeId, w: NodeId, b: NodeId, caches: Vec<SpatialAttentionCache> },
    ScaleChannels { x: NodeId, s: NodeId },
    ScaleSpatial { x: NodeId, m: NodeId },
    Cbp { x: NodeId, y: NodeId, engine: Arc<CompactBilinear>, caches: Vec<CbpCache> },
    GlobalAvgPool { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn from_vec(v: Vec<Option<Tensor>>) -> Self {
        Gradients(v)
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|t| t.all_finite())
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    training: bool,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
    batch_stats: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

fn shape_err(what: &str, got: &[usize]) -> Error {
    Error::Input(format!("{what}: unexpected shape {got:?}"))
}

impl<'a> Graph<'a> {
    /// `dropout_seed` drives the dropout masks in training mode.
    pub fn new(store: &'a ParamStore, training: bool, dropout_seed: u64) -> Self {
        Graph {
            store,
            training,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            batch_stats: BTreeMap::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Batch mean and variance recorded by each batch-norm layer in
    /// training mode, keyed by layer index.
    pub fn batch_stats(&self) -> &BTreeMap<usize, (Vec<f64>, Vec<f64>)> {
        &self.batch_stats
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let value = self.store.get(id).value.clone();
        let n = self.push(value, Op::Param(id), &[]);
        self.param_nodes.insert(id, n);
        n
    }

    /// The parameter as used by its layer: `sign(w)` for binarized
    /// parameters, `w` otherwise.
    pub fn weight(&mut self, id: ParamId) -> NodeId {
        let n = self.param(id);
        if self.store.get(id).binarized {
            self.binarize(n)
        } else {
            n
        }
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(b) != [ws[1]] {
            return Err(Error::Input(format!("dense: input {xs:?} vs weight {ws:?}")));
        }
        let (bsz, k, n) = (xs[0], ws[0], ws[1]);
        let mut out = Tensor::zeros(&[bsz, n]);
        for row in out.data_mut().chunks_exact_mut(n) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(bsz, k, n, self.value(x).data(), false, self.value(w).data(), false, out.data_mut(), true);
        Ok(self.push(out, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// Stride-1 same-padded `k x k` convolution; `w` is `k x k x cin x cout`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] {
            return Err(Error::Input(format!("conv: input {xs:?} vs kernel {ws:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            cout: ws[3],
            k: ws[0],
        };
        let y = conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), geom);
        let out = Tensor::from_vec(&[xs[0], xs[1], xs[2], ws[3]], y)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// Kernel-4 stride-2 transposed convolution; `w` is `cin x 4 x 4 x cout`.
    pub fn deconv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[3] {
            return Err(Error::Input(format!("deconv: input {xs:?} vs kernel {ws:?}")));
        }
        let geom = DeconvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            cout: ws[3],
        };
        let y = deconv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), geom);
        let out = Tensor::from_vec(&[xs[0], 2 * xs[1], 2 * xs[2], ws[3]], y)?;
        Ok(self.push(out, Op::Deconv { x, w, b, geom }, &[x, w, b]))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(shape_err("max_pool", &s));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[b, oh, ow, c]);
        let mut argmax = vec![0; b * oh * ow * c];
        let od = out.data_mut();
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut bv = f64::NEG_INFINITY;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xv[i] > bv || best == usize::MAX {
                                bv = xv[i];
                                best = i;
                            }
                        }
                        let o = ((n * oh + oy) * ow + ox) * c + ch;
                        od[o] = bv;
                        argmax[o] = best;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Normalises over every axis but the last. Training mode uses batch
    /// statistics (and records them); inference uses the running statistics
    /// of layer `bn`.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, bn: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("batch_norm", &s))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm gamma", self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            for r in xv.chunks_exact(c) {
                mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for r in xv.chunks_exact(c) {
                for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        } else {
            let st = self
                .store
                .bn()
                .get(bn)
                .ok_or_else(|| Error::Input(format!("no batch-norm state {bn}")))?;
            (st.mean.clone(), st.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = Tensor::zeros(&s);
        for ((xr, hr), or) in xv.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.data_mut().chunks_exact_mut(c)) {
            for ch in 0..c {
                hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                or[ch] = g[ch] * hr[ch] + be[ch];
            }
        }
        if self.training {
            self.batch_stats.insert(bn, (mean, var));
        }
        let training = self.training;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// `sign` forward, straight-through estimator backward.
    pub fn binarize(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), binarize(v.data())).expect("same shape");
        self.push(out, Op::Binarize { x }, &[x])
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let b = self.value(x).dim0();
        let r = self.value(x).row_len();
        self.reshape(x, &[b, r])
    }

    /// Concatenates two `B x N` tensors along the feature axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Input(format!("concat: {sa:?} with {sb:?}")));
        }
        let mut data = Vec::with_capacity(sa[0] * (sa[1] + sb[1]));
        for i in 0..sa[0] {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::from_vec(&[sa[0], sa[1] + sb[1]], data)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Input(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    fn sample_map(&self, x: NodeId, n: usize) -> FeatureMap {
        let s = self.shape(x);
        FeatureMap {
            h: s[1],
            w: s[2],
            c: s[3],
            data: self.value(x).row(n).to_vec(),
        }
    }

    /// CBAM channel gate, `B x C`. Parameters: `w1: C x C/r`, `b1`, `w2: C/r x C`, `b2`.
    pub fn channel_attention(&mut self, x: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("channel_attention", &s));
        }
        let ws = self.shape(w1);
        if ws.len() != 2 {
            return Err(shape_err("channel_attention w1", ws));
        }
        let view = ChannelMlpView {
            c: ws[0],
            hidden: ws[1],
            w1: self.value(w1).data(),
            b1: self.value(b1).data(),
            w2: self.value(w2).data(),
            b2: self.value(b2).data(),
        };
        let caches = Exec::default()
            .map_range(s[0], |n| channel_attention(&self.sample_map(x, n), view))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let data = caches.iter().flat_map(|c| c.weights().iter().copied()).collect();
        let out = Tensor::from_vec(&[s[0], s[3]], data)?;
        Ok(self.push(
            out,
            Op::ChannelAttention {
                x,
                w1,
                b1,
                w2,
                b2,
                caches,
            },
            &[x, w1, b1, w2, b2],
        ))
    }

    /// CBAM spatial gate, `B x H x W`. `w` is `k x k x 2`, `b` has one element.
    pub fn spatial_attention(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let ws = self.shape(w);
        if s.len() != 4 || ws.len() != 3 || ws[2] != 2 {
            return Err(shape_err("spatial_attention", &s));
        }
        let view = SpatialConvView {
            k: ws[0],
            w: self.value(w).data(),
            b: self.value(b).data()[0],
        };
        let caches = Exec::default()
            .map_range(s[0], |n| spatial_attention(&self.sample_map(x, n), view))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let data = caches.iter().flat_map(|c| c.map().iter().copied()).collect();
        let out = Tensor::from_vec(&[s[0], s[1], s[2]], data)?;
        Ok(self.push(out, Op::SpatialAttention { x, w, b, caches }, &[x, w, b]))
    }

    /// `x[b, :, :, c] * s[b, c]`.
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xs, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if xs.len() != 4 || ss != [xs[0], xs[3]] {
            return Err(Error::Input(format!("scale_channels: {xs:?} by {ss:?}")));
        }
        let c = xs[3];
        let mut out = self.value(x).clone();
        let per = out.row_len();
        let sv = self.value(s).data();
        for (n, sample) in out.data_mut().chunks_exact_mut(per).enumerate() {
            let w = &sv[n * c..(n + 1) * c];
            for px in sample.chunks_exact_mut(c) {
                px.iter_mut().zip(w).for_each(|(v, w)| *v *= w);
            }
        }
        Ok(self.push(out, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// `x[b, y, x, :] * m[b, y, x]`.
    pub fn scale_spatial(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (xs, ms) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        if xs.len() != 4 || ms != xs[..3] {
            return Err(Error::Input(format!("scale_spatial: {xs:?} by {ms:?}")));
        }
        let c = xs[3];
        let mut out = self.value(x).clone();
        let mv = self.value(m).data();
        for (px, &g) in out.data_mut().chunks_exact_mut(c).zip(mv) {
            px.iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(out, Op::ScaleSpatial { x, m }, &[x, m]))
    }

    /// Per-location compact bilinear pooling of two maps sharing `B x H x W`.
    pub fn compact_bilinear(&mut self, x: NodeId, y: NodeId, engine: Arc<CompactBilinear>) -> Result<NodeId> {
        let (xs, ys) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if xs.len() != 4 || ys.len() != 4 || xs[..3] != ys[..3] {
            return Err(Error::Input(format!("compact_bilinear: {xs:?} with {ys:?}")));
        }
        let (c1, c2, d) = (xs[3], ys[3], engine.dim());
        let locations = xs[0] * xs[1] * xs[2];
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        let caches = Exec::default()
            .map_range(locations, |l| engine.forward(&xv[l * c1..(l + 1) * c1], &yv[l * c2..(l + 1) * c2]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let data = caches.iter().flat_map(|c| c.output().iter().copied()).collect();
        let out = Tensor::from_vec(&[xs[0], xs[1], xs[2], d], data)?;
        Ok(self.push(out, Op::Cbp { x, y, engine, caches }, &[x, y]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", &s));
        }
        let (b, px, c) = (s[0], s[1] * s[2], s[3]);
        let mut out = Tensor::zeros(&[b, c]);
        let xv = self.value(x).data();
        for n in 0..b {
            let o = &mut out.data_mut()[n * c..(n + 1) * c];
            for p in xv[n * px * c..(n + 1) * px * c].chunks_exact(c) {
                o.iter_mut().zip(p).for_each(|(a, v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a /= px as f64);
        }
        Ok(self.push(out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::Input(format!("cross entropy: logits {s:?}, {} labels", labels.len())));
        }
        let probs = softmax_rows(self.value(logits).data(), s[1]);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * s[1] + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let out = Tensor::from_vec(&[1], vec![loss])?;
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// that contributed to it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Input("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = vec![None; self.store.len()];
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, g, &mut grads, &mut out)?;
        }
        Ok(Gradients(out))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut [Option<Tensor>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], target: NodeId, shape: &[usize], data: Vec<f64>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            let t = Tensor::from_vec(shape, data).expect("gradient shape");
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Input => {}
            Op::Param(pid) => match &mut params[*pid] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (bsz, k, n) = (xs[0], ws[0], ws[1]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; bsz * k];
                    gemm(bsz, n, k, gd, false, self.value(*w).data(), true, &mut dx, false);
                    acc(grads, *x, xs, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, bsz, n, self.value(*x).data(), true, gd, false, &mut dw, false);
                    acc(grads, *w, ws, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n];
                    for r in gd.chunks_exact(n) {
                        db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                    acc(grads, *b, &[n], db);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let cg = conv_backward(self.value(*x).data(), self.value(*w).data(), gd, *geom, self.needs(*x));
                if let Some(dx) = cg.dx {
                    acc(grads, *x, self.shape(*x), dx);
                }
                acc(grads, *w, self.shape(*w), cg.dw);
                acc(grads, *b, self.shape(*b), cg.db);
            }
            Op::Deconv { x, w, b, geom } => {
                let dg = deconv_backward(self.value(*x).data(), self.value(*w).data(), gd, *geom, self.needs(*x));
                if let Some(dx) = dg.dx {
                    acc(grads, *x, self.shape(*x), dx);
                }
                acc(grads, *w, self.shape(*w), dg.dw);
                acc(grads, *b, self.shape(*b), dg.db);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &v) in argmax.iter().zip(gd) {
                    dx[i] += v;
                }
                acc(grads, *x, self.shape(*x), dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let rows = (gd.len() / c) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gr, hr) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += gr[ch] * hr[ch];
                        dbeta[ch] += gr[ch];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for ((dr, gr), hr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let s = gam[ch] * inv_std[ch];
                            dr[ch] = if *training {
                                s * (gr[ch] - dbeta[ch] / rows - hr[ch] * dgamma[ch] / rows)
                            } else {
                                s * gr[ch]
                            };
                        }
                    }
                    acc(grads, *x, self.shape(*x), dx);
                }
                acc(grads, *gamma, &[c], dgamma);
                acc(grads, *beta, &[c], dbeta);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                acc(grads, *x, self.shape(*x), dx);
            }
            Op::Binarize { x } => {
                acc(grads, *x, self.shape(*x), binarize_backward(self.value(*x).data(), gd));
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(grads, *x, self.shape(*x), dx);
            }
            Op::Reshape { x } => acc(grads, *x, self.shape(*x), gd.to_vec()),
            Op::Concat { a, b } => {
                let (na, nb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let mut da = Vec::with_capacity(gd.len());
                let mut db = Vec::with_capacity(gd.len());
                for r in gd.chunks_exact(na + nb) {
                    da.extend_from_slice(&r[..na]);
                    db.extend_from_slice(&r[na..]);
                }
                acc(grads, *a, self.shape(*a), da);
                acc(grads, *b, self.shape(*b), db);
            }
            Op::Add { a, b } => {
                acc(grads, *a, self.shape(*a), gd.to_vec());
                acc(grads, *b, self.shape(*b), gd.to_vec());
            }
            Op::ChannelAttention {
                x,
                w1,
                b1,
                w2,
                b2,
                caches,
            } => {
                let ws = self.shape(*w1);
                let view = ChannelMlpView {
                    c: ws[0],
                    hidden: ws[1],
                    w1: self.value(*w1).data(),
                    b1: self.value(*b1).data(),
                    w2: self.value(*w2).data(),
                    b2: self.value(*b2).data(),
                };
                let c = ws[0];
                let per = Exec::default().map_range(caches.len(), |n| {
                    channel_attention_backward(&self.sample_map(*x, n), view, &caches[n], &gd[n * c..(n + 1) * c])
                });
                let mut dx = Vec::with_capacity(self.value(*x).len());
                let (mut dw1, mut db1) = (vec![0.0; view.w1.len()], vec![0.0; view.b1.len()]);
                let (mut dw2, mut db2) = (vec![0.0; view.w2.len()], vec![0.0; view.b2.len()]);
                for (gx, pg) in per {
                    dx.extend(gx.data);
                    add_into(&mut dw1, &pg.w1);
                    add_into(&mut db1, &pg.b1);
                    add_into(&mut dw2, &pg.w2);
                    add_into(&mut db2, &pg.b2);
                }
                acc(grads, *x, self.shape(*x), dx);
                acc(grads, *w1, self.shape(*w1), dw1);
                acc(grads, *b1, self.shape(*b1), db1);
                acc(grads, *w2, self.shape(*w2), dw2);
                acc(grads, *b2, self.shape(*b2), db2);
            }
            Op::SpatialAttention { x, w, b, caches } => {
                let view = SpatialConvView {
                    k: self.shape(*w)[0],
                    w: self.value(*w).data(),
                    b: self.value(*b).data()[0],
                };
                let hw = self.shape(*x)[1] * self.shape(*x)[2];
                let per = Exec::default().map_range(caches.len(), |n| {
                    spatial_attention_backward(&self.sample_map(*x, n), view, &caches[n], &gd[n * hw..(n + 1) * hw])
                });
                let mut dx = Vec::with_capacity(self.value(*x).len());
                let mut dw = vec![0.0; view.w.len()];
                let mut db = 0.0;
                for (gx, pg) in per {
                    dx.extend(gx.data);
                    add_into(&mut dw, &pg.w);
                    db += pg.b;
                }
                acc(grads, *x, self.shape(*x), dx);
                acc(grads, *w, self.shape(*w), dw);
                acc(grads, *b, &[1], vec![db]);
            }
            Op::ScaleChannels { x, s } => {
                let xs = self.shape(*x);
                let c = xs[3];
                let per = xs[1] * xs[2] * c;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0; sv.len()];
                for n in 0..xs[0] {
                    let w = &sv[n * c..(n + 1) * c];
                    let dsn = &mut ds[n * c..(n + 1) * c];
                    for p in (n * per..(n + 1) * per).step_by(c) {
                        for ch in 0..c {
                            dx[p + ch] = gd[p + ch] * w[ch];
                            dsn[ch] += gd[p + ch] * xv[p + ch];
                        }
                    }
                }
                acc(grads, *x, xs, dx);
                acc(grads, *s, self.shape(*s), ds);
            }
            Op::ScaleSpatial { x, m } => {
                let c = self.shape(*x)[3];
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                let mut dx = vec![0.0; xv.len()];
                let mut dm = vec![0.0; mv.len()];
                for (i, &mval) in mv.iter().enumerate() {
                    for ch in 0..c {
                        let p = i * c + ch;
                        dx[p] = gd[p] * mval;
                        dm[i] += gd[p] * xv[p];
                    }
                }
                acc(grads, *x, self.shape(*x), dx);
                acc(grads, *m, self.shape(*m), dm);
            }
            Op::Cbp { x, y, engine, caches } => {
                let (c1, c2, d) = (self.shape(*x)[3], self.shape(*y)[3], engine.dim());
                let (xv, yv) = (self.value(*x).data(), self.value(*y).data());
                let per = Exec::default().map_range(caches.len(), |l| {
                    engine.backward(
                        &xv[l * c1..(l + 1) * c1],
                        &yv[l * c2..(l + 1) * c2],
                        &caches[l],
                        &gd[l * d..(l + 1) * d],
                    )
                });
                let mut dx = Vec::with_capacity(xv.len());
                let mut dy = Vec::with_capacity(yv.len());
                for (gx, gy) in per {
                    dx.extend(gx);
                    dy.extend(gy);
                }
                acc(grads, *x, self.shape(*x), dx);
                acc(grads, *y, self.shape(*y), dy);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let (px, c) = (s[1] * s[2], s[3]);
                let mut dx = Vec::with_capacity(s[0] * px * c);
                for n in 0..s[0] {
                    let gn = &gd[n * c..(n + 1) * c];
                    for _ in 0..px {
                        dx.extend(gn.iter().map(|v| v / px as f64));
                    }
                }
                acc(grads, *x, s, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                acc(grads, *logits, self.shape(*logits), dl);
            }
        }
        Ok(())
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Row-wise numerically stable softmax of a row-major `n x k` matrix.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for r in data.chunks_exact(k) {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion_ops::testutil::{max_rel_error, numeric_grad};
    use crate::fusion_ops::SketchParams;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    /// Checks every parameter gradient of `build` against central differences.
    fn check_params(store: &ParamStore, build: &dyn Fn(&mut Graph) -> NodeId, tol: f64) {
        let mut g = Graph::new(store, true, 7);
        let loss = build(&mut g);
        let grads = g.backward(loss).unwrap();
        for id in 0..store.len() {
            let analytic = grads.get(id).expect("every parameter is used").data().to_vec();
            let numeric = numeric_grad(store.get(id).value.data(), |v| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut().copy_from_slice(v);
                let mut g = Graph::new(&s, true, 7);
                let l = build(&mut g);
                g.value(l).data()[0]
            });
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < tol, "{}: rel error {err}", store.get(id).name);
        }
    }

    #[test]
    fn dense_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rand_tensor(&[6, 5], &mut rng, 1.0), false).unwrap();
        let b1 = store.add("b1", rand_tensor(&[5], &mut rng, 0.1), false).unwrap();
        let ga = store.add("gamma", rand_tensor(&[5], &mut rng, 1.0), false).unwrap();
        let be = store.add("beta", rand_tensor(&[5], &mut rng, 0.5), false).unwrap();
        let w2 = store.add("w2", rand_tensor(&[10, 3], &mut rng, 1.0), false).unwrap();
        let b2 = store.add("b2", rand_tensor(&[3], &mut rng, 0.1), false).unwrap();
        let bn = store.add_bn("bn", 5);
        let x = rand_tensor(&[4, 6], &mut rng, 1.0);
        let build = |g: &mut Graph| {
            let xi = g.input(x.clone());
            let (w, b) = (g.param(w1), g.param(b1));
            let h = g.dense(xi, w, b).unwrap();
            let (gm, bt) = (g.param(ga), g.param(be));
            let h = g.batch_norm(h, gm, bt, bn).unwrap();
            let a = g.relu(h);
            let a = g.dropout(a, 0.25);
            let cat = g.concat(a, h).unwrap();
            let (w, b) = (g.param(w2), g.param(b2));
            let logits = g.dense(cat, w, b).unwrap();
            g.softmax_cross_entropy(logits, &[0, 2, 1, 2]).unwrap()
        };
        check_params(&store, &build, 1e-4);
    }

    #[test]
    fn conv_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let kw = store.add("conv.w", rand_tensor(&[3, 3, 2, 4], &mut rng, 0.5), false).unwrap();
        let kb = store.add("conv.b", rand_tensor(&[4], &mut rng, 0.1), false).unwrap();
        let w1 = store.add("ca.w1", rand_tensor(&[4, 2], &mut rng, 0.5), false).unwrap();
        let b1 = store.add("ca.b1", rand_tensor(&[2], &mut rng, 0.1), false).unwrap();
        let w2 = store.add("ca.w2", rand_tensor(&[2, 4], &mut rng, 0.5), false).unwrap();
        let b2 = store.add("ca.b2", rand_tensor(&[4], &mut rng, 0.1), false).unwrap();
        let sw = store.add("sa.w", rand_tensor(&[3, 3, 2], &mut rng, 0.5), false).unwrap();
        let sb = store.add("sa.b", rand_tensor(&[1], &mut rng, 0.1), false).unwrap();
        let dw = store.add("out.w", rand_tensor(&[4, 3], &mut rng, 0.5), false).unwrap();
        let db = store.add("out.b", rand_tensor(&[3], &mut rng, 0.1), false).unwrap();
        let x = rand_tensor(&[2, 4, 4, 2], &mut rng, 1.0);
        let build = |g: &mut Graph| {
            let xi = g.input(x.clone());
            let (w, b) = (g.param(kw), g.param(kb));
            let h = g.conv(xi, w, b).unwrap();
            let (a, bb, c, d) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
            let cw = g.channel_attention(h, a, bb, c, d).unwrap();
            let h = g.scale_channels(h, cw).unwrap();
            let (w, b) = (g.param(sw), g.param(sb));
            let sm = g.spatial_attention(h, w, b).unwrap();
            let h = g.scale_spatial(h, sm).unwrap();
            let h = g.max_pool(h).unwrap();
            let p = g.global_avg_pool(h).unwrap();
            let (w, b) = (g.param(dw), g.param(db));
            let logits = g.dense(p, w, b).unwrap();
            g.softmax_cross_entropy(logits, &[1, 2]).unwrap()
        };
        check_params(&store, &build, 1e-4);
    }

    #[test]
    fn deconv_cbp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let kw = store.add("de.w", rand_tensor(&[2, 4, 4, 3], &mut rng, 0.5), false).unwrap();
        let kb = store.add("de.b", rand_tensor(&[3], &mut rng, 0.1), false).unwrap();
        let cw = store.add("conv.w", rand_tensor(&[3, 3, 3, 3], &mut rng, 0.5), false).unwrap();
        let cb = store.add("conv.b", rand_tensor(&[3], &mut rng, 0.1), false).unwrap();
        let ow = store.add("out.w", rand_tensor(&[8, 2], &mut rng, 1.0), false).unwrap();
        let ob = store.add("out.b", rand_tensor(&[2], &mut rng, 0.1), false).unwrap();
        let engine = Arc::new(CompactBilinear::new(SketchParams::draw(3, 3, 8, 11).unwrap()).unwrap());
        let v = rand_tensor(&[2, 8], &mut rng, 1.0);
        let img = rand_tensor(&[2, 4, 4, 3], &mut rng, 1.0);
        let build = |g: &mut Graph| {
            let vi = g.input(v.clone());
            let seed = g.reshape(vi, &[2, 2, 2, 2]).unwrap();
            let (w, b) = (g.param(kw), g.param(kb));
            let a = g.deconv(seed, w, b).unwrap();
            let ii = g.input(img.clone());
            let (w, b) = (g.param(cw), g.param(cb));
            let im = g.conv(ii, w, b).unwrap();
            let mixed = g.add(a, im).unwrap();
            let fused = g.compact_bilinear(mixed, im, engine.clone()).unwrap();
            let p = g.global_avg_pool(fused).unwrap();
            let (w, b) = (g.param(ow), g.param(ob));
            let logits = g.dense(p, w, b).unwrap();
            g.softmax_cross_entropy(logits, &[0, 1]).unwrap()
        };
        check_params(&store, &build, 1e-4);
    }

    #[test]
    fn inference_batch_norm_uses_running_stats() {
        let mut store = ParamStore::new();
        let ga = store.add("g", Tensor::filled(&[2], 2.0), false).unwrap();
        let be = store.add("b", Tensor::filled(&[2], 1.0), false).unwrap();
        let bn = store.add_bn("bn", 2);
        store.bn_mut()[bn].mean = vec![1.0, -1.0];
        store.bn_mut()[bn].var = vec![4.0, 1.0];
        let mut g = Graph::new(&store, false, 0);
        let x = g.input(Tensor::from_vec(&[1, 2], vec![3.0, 0.0]).unwrap());
        let (gm, bt) = (g.param(ga), g.param(be));
        let y = g.batch_norm(x, gm, bt, bn).unwrap();
        let expect = [2.0 * 2.0 / (4.0 + BN_EPS).sqrt() + 1.0, 2.0 * 1.0 / (1.0 + BN_EPS).sqrt() + 1.0];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.batch_stats().is_empty());
    }

    #[test]
    fn dropout_is_identity_at_inference_and_scaled_in_training() {
        let store = ParamStore::new();
        let x = Tensor::filled(&[50, 40], 1.0);
        let mut g = Graph::new(&store, false, 0);
        let xi = g.input(x.clone());
        assert_eq!(g.dropout(xi, 0.25), xi);
        let mut g = Graph::new(&store, true, 0);
        let xi = g.input(x);
        let d = g.dropout(xi, 0.25);
        let vals = g.value(d).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let kept = vals.iter().filter(|&&v| v > 0.0).count() as f64 / vals.len() as f64;
        assert!((kept - 0.75).abs() < 0.05, "kept fraction {kept}");
    }

    #[test]
    fn unused_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::filled(&[2, 2], 0.5), false).unwrap();
        let b = store.add("b", Tensor::zeros(&[2]), false).unwrap();
        store.add("unused", Tensor::zeros(&[3]), false).unwrap();
        let mut g = Graph::new(&store, true, 0);
        let x = g.input(Tensor::filled(&[1, 2], 1.0));
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.dense(x, wn, bn).unwrap();
        let l = g.softmax_cross_entropy(y, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_some() && grads.get(b).is_some());
        assert!(grads.get(2).is_none());
    }

    #[test]
    fn binarized_weight_uses_sign_with_straight_through_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(&[2, 1], vec![0.3, -2.0]).unwrap(), true).unwrap();
        let b = store.add("b", Tensor::zeros(&[1]), false).unwrap();
        let mut g = Graph::new(&store, true, 0);
        let x = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
        let (wn, bn) = (g.weight(w), g.param(b));
        let y = g.dense(x, wn, bn).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
        let other = g.input(Tensor::zeros(&[1, 1]));
        let z = g.concat(y, other).unwrap();
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        let gw = grads.get(w).unwrap().data();
        assert!(gw[0] != 0.0);
        assert_eq!(gw[1], 0.0);
    }
}
