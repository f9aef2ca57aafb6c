use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Arch, ModelSpec};
use crate::error::{Error, Result};
use crate::fusion_ops::{CompactBilinear, SketchParams, DECONV_KERNEL};
use crate::nn::{softmax_rows, Graph, NodeId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Skip every CBAM module, i.e. force all attention weights to 1.
    pub bypass_attention: bool,
}

/// Output nodes of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    /// Activations feeding the classifier (`batch x head`).
    pub embedding: NodeId,
    pub logits: NodeId,
}

/// Pre-softmax scores, `batch x n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    scores: Tensor,
}

impl Logits {
    pub fn new(scores: Tensor) -> Self {
        Logits { scores }
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn batch(&self) -> usize {
        self.scores.dim0()
    }

    pub fn probabilities(&self) -> Tensor {
        let k = self.scores.row_len();
        Tensor::from_vec(self.scores.shape(), softmax_rows(self.scores.data(), k)).expect("same shape")
    }

    /// Arg-max class per row (lowest index on ties).
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|i| {
                let r = self.scores.row(i);
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// FNV-1a, used to give every parameter its own init stream.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    /// He-uniform: `U(-l, l)` with `l = sqrt(6 / fan_in)`.
    fn he(&mut self, name: &str, shape: &[usize], fan_in: usize, binarized: bool) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let limit = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.store.add(name, Tensor::from_vec(shape, data)?, binarized)?;
        Ok(())
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.store.add(name, Tensor::filled(shape, v), false)?;
        Ok(())
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, binarized: bool) -> Result<()> {
        self.he(&format!("{name}.w"), &[n_in, n_out], n_in, binarized)?;
        self.constant(&format!("{name}.b"), &[n_out], 0.0)
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, binarized: bool) -> Result<()> {
        self.he(&format!("{name}.w"), &[k, k, cin, cout], k * k * cin, binarized)?;
        self.constant(&format!("{name}.b"), &[cout], 0.0)
    }

    /// Each output of a kernel-4 stride-2 transposed conv sees 2x2 taps per
    /// input channel.
    fn deconv(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        let k = DECONV_KERNEL;
        self.he(&format!("{name}.w"), &[cin, k, k, cout], 4 * cin, false)?;
        self.constant(&format!("{name}.b"), &[cout], 0.0)
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.constant(&format!("{name}.gamma"), &[c], 1.0)?;
        self.constant(&format!("{name}.beta"), &[c], 0.0)?;
        self.store.add_bn(name, c);
        Ok(())
    }

    fn cbam(&mut self, name: &str, c: usize, ratio: usize, k: usize) -> Result<()> {
        let hidden = c / ratio;
        self.he(&format!("{name}.ca.w1"), &[c, hidden], c, false)?;
        self.constant(&format!("{name}.ca.b1"), &[hidden], 0.0)?;
        self.he(&format!("{name}.ca.w2"), &[hidden, c], hidden, false)?;
        self.constant(&format!("{name}.ca.b2"), &[c], 0.0)?;
        self.he(&format!("{name}.sa.w"), &[k, k, 2], k * k * 2, false)?;
        self.constant(&format!("{name}.sa.b"), &[1], 0.0)
    }

    fn deconv_stack(&mut self, prefix: &str, seed: (usize, usize, usize), target: (usize, usize, usize)) -> Result<()> {
        let n = crate::fusion_ops::deconv::doublings((seed.0, seed.1), (target.0, target.1))?;
        for l in 0..n {
            let cin = if l == 0 { seed.2 } else { target.2 };
            self.deconv(&format!("{prefix}{l}"), cin, target.2)?;
        }
        Ok(())
    }
}

/// A fusion classifier: spec, seed, parameters and (for deconv_cbp) the
/// frozen count-sketch.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    store: ParamStore,
    sketch: Option<Arc<CompactBilinear>>,
}

const SKETCH_STREAM: &str = "fusion.cbp";

impl Model {
    /// Initialises every parameter deterministically from `seed`. Each
    /// tensor draws from its own stream keyed by its name, so layers shared
    /// by two architectures start from identical values.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed };
        let bnn = spec.arch == Arch::Bnn;
        let blocks = spec.conv_widths.len();
        let cbam = spec.arch.cbam_after(blocks);
        let mut cin = 3;
        for (i, &c) in spec.conv_widths.iter().enumerate() {
            init.conv(&format!("img.conv{i}"), 3, cin, c, bnn && i > 0)?;
            init.bn(&format!("img.bn{i}"), c)?;
            if cbam.contains(&i) {
                init.cbam(&format!("img.cbam{i}"), c, spec.cbam_ratio, spec.cbam_kernel)?;
            }
            cin = c;
        }
        let last_c = cin;
        let side = spec.side_after(blocks);
        if spec.arch != Arch::DeconvCbp {
            init.dense("img.fc", side * side * last_c, spec.image_dense, bnn)?;
            init.bn("img.fc_bn", spec.image_dense)?;
        }
        let mut prev = spec.audio_dim;
        for (j, &w) in spec.audio_widths.iter().enumerate() {
            init.dense(&format!("aud.fc{j}"), prev, w, bnn)?;
            init.bn(&format!("aud.bn{j}"), w)?;
            prev = w;
        }
        let audio_out = prev;
        let mut sketch = None;
        let fused = match spec.arch {
            Arch::DeconvCbp => {
                let grid = spec.seed_grid(blocks, audio_out)?;
                init.deconv_stack("aud.deconv", grid, (side, side, last_c))?;
                init.bn("aud.deconv_bn", last_c)?;
                let params = SketchParams::draw(last_c, last_c, spec.cbp_dim, seed ^ name_hash(SKETCH_STREAM))?;
                sketch = Some(Arc::new(CompactBilinear::new(params)?));
                spec.cbp_dim
            }
            _ => spec.image_dense + audio_out,
        };
        if spec.arch == Arch::Xflow {
            let s2 = spec.side_after(2);
            let c2 = spec.conv_widths[1];
            let a2 = spec.audio_widths[1];
            init.deconv_stack("xflow.a2i", spec.seed_grid(2, a2)?, (s2, s2, c2))?;
            init.dense("xflow.i2a", s2 * s2 * c2, a2, false)?;
        }
        init.dense("head.fc", fused, spec.head, bnn)?;
        init.bn("head.bn", spec.head)?;
        init.dense("out", spec.head, spec.n_classes, false)?;
        Ok(Model {
            spec: spec.clone(),
            seed,
            store,
            sketch,
        })
    }

    /// Reassembles a model from stored parts, checking that the parameter
    /// names and shapes match what `spec` builds.
    pub fn from_parts(spec: ModelSpec, seed: u64, store: ParamStore, sketch: Option<SketchParams>) -> Result<Self> {
        let fresh = Model::build(&spec, seed)?;
        let fp = fresh.store.params();
        let sp = store.params();
        if fp.len() != sp.len() || store.bn().len() != fresh.store.bn().len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters / {} batch-norm layers stored, {} architecture has {} / {}",
                sp.len(),
                store.bn().len(),
                spec.arch,
                fp.len(),
                fresh.store.bn().len()
            )));
        }
        for (a, b) in fp.iter().zip(sp) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.binarized != b.binarized {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        for (a, b) in fresh.store.bn().iter().zip(store.bn()) {
            if a.name != b.name || a.mean.len() != b.mean.len() || a.var.len() != b.var.len() {
                return Err(Error::Checkpoint(format!("batch-norm state `{}` does not match `{}`", b.name, a.name)));
            }
        }
        let sketch = match (fresh.sketch, sketch) {
            (None, None) => None,
            (Some(f), Some(s)) => {
                s.validate()?;
                if s.d != f.dim() || s.h1.len() != f.params().h1.len() || s.h2.len() != f.params().h2.len() {
                    return Err(Error::Checkpoint("sketch parameters have the wrong size".into()));
                }
                Some(Arc::new(CompactBilinear::new(s)?))
            }
            _ => return Err(Error::Checkpoint("sketch parameters present iff the model uses compact bilinear pooling".into())),
        };
        Ok(Model {
            spec,
            seed,
            store,
            sketch,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn sketch(&self) -> Option<&SketchParams> {
        self.sketch.as_deref().map(|s| s.params())
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Width of the embedding fed to the classifier.
    pub fn embedding_dim(&self) -> usize {
        self.spec.head
    }

    fn check_inputs(&self, images: &Tensor, audio: &Tensor) -> Result<usize> {
        let s = self.spec.image_side;
        let b = images.shape().first().copied().unwrap_or(0);
        if b == 0 || images.shape() != [b, s, s, 3] {
            return Err(Error::Input(format!(
                "images must be batch x {s} x {s} x 3 with batch >= 1, got {:?}",
                images.shape()
            )));
        }
        if audio.shape() != [b, self.spec.audio_dim] {
            return Err(Error::Input(format!(
                "audio must be {b} x {}, got {:?}",
                self.spec.audio_dim,
                audio.shape()
            )));
        }
        if !images.all_finite() || !audio.all_finite() {
            return Err(Error::Input("inputs contain non-finite values".into()));
        }
        Ok(b)
    }

    fn id(&self, name: &str) -> Result<usize> {
        self.store
            .id(name)
            .ok_or_else(|| Error::Input(format!("model has no parameter `{name}`")))
    }

    fn has(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    fn dense(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let w = g.weight(self.id(&format!("{name}.w"))?);
        let b = g.param(self.id(&format!("{name}.b"))?);
        g.dense(x, w, b)
    }

    fn batch_norm(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let gamma = g.param(self.id(&format!("{name}.gamma"))?);
        let beta = g.param(self.id(&format!("{name}.beta"))?);
        let bn = self
            .store
            .bn_id(name)
            .ok_or_else(|| Error::Input(format!("model has no batch-norm layer `{name}`")))?;
        g.batch_norm(x, gamma, beta, bn)
    }

    /// ReLU, or `sign` behind binarized layers.
    fn activate(&self, g: &mut Graph, x: NodeId, layer: &str) -> NodeId {
        let binarized = self
            .store
            .by_name(&format!("{layer}.w"))
            .is_some_and(|p| p.binarized);
        if binarized {
            g.binarize(x)
        } else {
            g.relu(x)
        }
    }

    /// Dense (or conv) layer, BN, activation, dropout.
    fn dense_unit(&self, g: &mut Graph, x: NodeId, layer: &str, bn: &str) -> Result<NodeId> {
        let h = self.dense(g, x, layer)?;
        let h = self.batch_norm(g, h, bn)?;
        let h = self.activate(g, h, layer);
        Ok(g.dropout(h, self.spec.dropout))
    }

    fn cbam(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let id = |p: &str| self.id(&format!("{name}.{p}"));
        let (w1, b1) = (g.param(id("ca.w1")?), g.param(id("ca.b1")?));
        let (w2, b2) = (g.param(id("ca.w2")?), g.param(id("ca.b2")?));
        let cw = g.channel_attention(x, w1, b1, w2, b2)?;
        let x = g.scale_channels(x, cw)?;
        let (sw, sb) = (g.param(id("sa.w")?), g.param(id("sa.b")?));
        let sm = g.spatial_attention(x, sw, sb)?;
        g.scale_spatial(x, sm)
    }

    /// conv, BN, activation, optional CBAM, 2x2 max-pool, dropout.
    fn conv_block(&self, g: &mut Graph, x: NodeId, i: usize, opts: ForwardOptions) -> Result<NodeId> {
        let layer = format!("img.conv{i}");
        let w = g.weight(self.id(&format!("{layer}.w"))?);
        let b = g.param(self.id(&format!("{layer}.b"))?);
        let h = g.conv(x, w, b)?;
        let h = self.batch_norm(g, h, &format!("img.bn{i}"))?;
        let mut h = self.activate(g, h, &layer);
        let cbam = format!("img.cbam{i}");
        if !opts.bypass_attention && self.has(&format!("{cbam}.ca.w1")) {
            h = self.cbam(g, h, &cbam)?;
        }
        let h = g.max_pool(h)?;
        Ok(g.dropout(h, self.spec.dropout))
    }

    /// Reshapes `v` to `seed` and runs the transposed-conv stack `prefix`
    /// (ReLU between layers, none after the last).
    fn deconv_stack(&self, g: &mut Graph, v: NodeId, prefix: &str, seed: (usize, usize, usize)) -> Result<NodeId> {
        let b = g.value(v).dim0();
        let mut x = g.reshape(v, &[b, seed.0, seed.1, seed.2])?;
        let mut l = 0;
        while self.has(&format!("{prefix}{l}.w")) {
            if l > 0 {
                x = g.relu(x);
            }
            let w = g.param(self.id(&format!("{prefix}{l}.w"))?);
            let bias = g.param(self.id(&format!("{prefix}{l}.b"))?);
            x = g.deconv(x, w, bias)?;
            l += 1;
        }
        Ok(x)
    }

    /// Records the full forward pass on `g`.
    pub fn graph(&self, g: &mut Graph, images: &Tensor, audio: &Tensor, opts: ForwardOptions) -> Result<Heads> {
        self.check_inputs(images, audio)?;
        let spec = &self.spec;
        let blocks = spec.conv_widths.len();
        let xflow = spec.arch == Arch::Xflow;
        let mut x = g.input(images.clone());
        let mut a = g.input(audio.clone());
        let mut audio_done = 0;
        for i in 0..blocks {
            x = self.conv_block(g, x, i, opts)?;
            if xflow && i == 1 {
                for j in 0..2 {
                    a = self.dense_unit(g, a, &format!("aud.fc{j}"), &format!("aud.bn{j}"))?;
                }
                audio_done = 2;
                let (x0, a0) = (x, a);
                let grid = spec.seed_grid(2, spec.audio_widths[1])?;
                let up = self.deconv_stack(g, a0, "xflow.a2i", grid)?;
                x = g.add(x0, up)?;
                let flat = g.flatten(x0)?;
                let proj = self.dense(g, flat, "xflow.i2a")?;
                a = g.add(a0, proj)?;
            }
        }
        for j in audio_done..spec.audio_widths.len() {
            a = self.dense_unit(g, a, &format!("aud.fc{j}"), &format!("aud.bn{j}"))?;
        }
        let fused = if spec.arch == Arch::DeconvCbp {
            let audio_out = spec.audio_widths[spec.audio_widths.len() - 1];
            let grid = spec.seed_grid(blocks, audio_out)?;
            let m = self.deconv_stack(g, a, "aud.deconv", grid)?;
            let m = self.batch_norm(g, m, "aud.deconv_bn")?;
            let m = g.relu(m);
            let engine = self
                .sketch
                .clone()
                .ok_or_else(|| Error::Input("deconv_cbp model without sketch parameters".into()))?;
            let pooled = g.compact_bilinear(x, m, engine)?;
            g.global_avg_pool(pooled)?
        } else {
            let flat = g.flatten(x)?;
            let img = self.dense_unit(g, flat, "img.fc", "img.fc_bn")?;
            g.concat(img, a)?
        };
        let embedding = self.dense_unit(g, fused, "head.fc", "head.bn")?;
        let logits = self.dense(g, embedding, "out")?;
        Ok(Heads { embedding, logits })
    }

    /// Inference-mode logits (dropout off, running batch-norm statistics).
    pub fn forward(&self, images: &Tensor, audio: &Tensor) -> Result<Logits> {
        self.forward_with(images, audio, ForwardOptions::default())
    }

    pub fn forward_with(&self, images: &Tensor, audio: &Tensor, opts: ForwardOptions) -> Result<Logits> {
        let mut g = Graph::new(&self.store, false, 0);
        let heads = self.graph(&mut g, images, audio, opts)?;
        Ok(Logits::new(g.value(heads.logits).clone()))
    }

    /// Inference-mode penultimate activations, `batch x head`.
    pub fn embed(&self, images: &Tensor, audio: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, false, 0);
        let heads = self.graph(&mut g, images, audio, ForwardOptions::default())?;
        Ok(g.value(heads.embedding).clone())
    }

    /// Applies the final classifier layer to embeddings.
    pub fn classify(&self, embeddings: &Tensor) -> Result<Logits> {
        if embeddings.shape().len() != 2 || embeddings.row_len() != self.spec.head {
            return Err(Error::Input(format!(
                "embeddings must be batch x {}, got {:?}",
                self.spec.head,
                embeddings.shape()
            )));
        }
        let mut g = Graph::new(&self.store, false, 0);
        let x = g.input(embeddings.clone());
        let y = self.dense(&mut g, x, "out")?;
        Ok(Logits::new(g.value(y).clone()))
    }

    /// Text table of parameter tensors grouped by layer.
    pub fn summary(&self) -> String {
        let mut rows: Vec<(String, Vec<String>, usize)> = Vec::new();
        for p in self.store.params() {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l).to_string();
            let shape = format!("{}{:?}", p.name.rsplit('.').next().unwrap_or(""), p.value.shape());
            match rows.last_mut() {
                Some((l, shapes, n)) if *l == layer => {
                    shapes.push(shape);
                    *n += p.value.len();
                }
                _ => rows.push((layer, vec![shape], p.value.len())),
            }
        }
        let mut out = format!(
            "{} ({}), seed {}\n{:<16} {:<48} {:>10}\n",
            self.spec.arch.network_name(),
            self.spec.arch,
            self.seed,
            "layer",
            "tensors",
            "params"
        );
        for (layer, shapes, n) in &rows {
            out.push_str(&format!("{layer:<16} {:<48} {n:>10}\n", shapes.join(" ")));
        }
        out.push_str(&format!("{:<16} {:<48} {:>10}\n", "total", "", self.param_count()));
        if let Some(s) = &self.sketch {
            out.push_str(&format!("count sketch: d = {}, seed {}\n", s.dim(), s.params().seed));
        }
        out
    }
}
