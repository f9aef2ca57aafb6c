use std::collections::BTreeMap;

use avguard::models::{decode_checkpoint, encode_checkpoint, Arch, ForwardOptions, Model, ModelSpec};
use avguard::nn::{Graph, NodeId};
use avguard::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(spec: &ModelSpec, batch: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_side;
    let img = (0..batch * s * s * 3).map(|_| rng.gen::<f64>()).collect();
    let aud = (0..batch * spec.audio_dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
    (
        Tensor::from_vec(&[batch, s, s, 3], img).unwrap(),
        Tensor::from_vec(&[batch, spec.audio_dim], aud).unwrap(),
    )
}

#[test]
fn baseline_parameter_count_matches_layer_table() {
    // conv 3x3: 9*cin*cout + cout; dense: in*out + out; BN: gamma + beta.
    let table = [
        9 * 3 * 32 + 32,
        2 * 32,
        9 * 32 * 64 + 64,
        2 * 64,
        9 * 64 * 128 + 128,
        2 * 128,
        8 * 8 * 128 * 256 + 256,
        2 * 256,
        1000 * 512 + 512,
        2 * 512,
        512 * 256 + 256,
        2 * 256,
        512 * 128 + 128,
        2 * 128,
        128 * 5 + 5,
    ];
    let expected: usize = table.iter().sum();
    assert_eq!(expected, 2_903_557);
    let m = Model::build(&ModelSpec::paper(Arch::Baseline), 0).unwrap();
    assert_eq!(m.param_count(), expected);
}

#[test]
fn unknown_architecture_is_a_config_error() {
    assert!(matches!(ModelSpec::paper_arch("resnet50"), Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_identical_parameters() {
    for arch in Arch::ALL {
        let a = Model::build(&ModelSpec::tiny(arch), 9).unwrap();
        let b = Model::build(&ModelSpec::tiny(arch), 9).unwrap();
        let c = Model::build(&ModelSpec::tiny(arch), 10).unwrap();
        for ((pa, pb), pc) in a.store().params().iter().zip(b.store().params()).zip(c.store().params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&pa.value), bits(&pb.value), "{}", pa.name);
            if pa.name.ends_with(".w") {
                assert_ne!(bits(&pa.value), bits(&pc.value), "{}", pa.name);
            }
        }
        assert_eq!(a.sketch(), b.sketch());
    }
}

#[test]
fn every_architecture_honours_the_logits_contract() {
    for arch in Arch::ALL {
        for spec in [ModelSpec::tiny(arch), ModelSpec::paper(arch)] {
            let m = Model::build(&spec, 3).unwrap();
            let (img, aud) = random_inputs(&spec, 2, 4);
            let l1 = m.forward(&img, &aud).unwrap();
            let l2 = m.forward(&img, &aud).unwrap();
            assert_eq!(l1.scores().shape(), &[2, 5], "{arch}");
            assert_eq!(l1, l2, "{arch} inference is deterministic");
            let p = l1.probabilities();
            for i in 0..2 {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(p.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let emb = m.embed(&img, &aud).unwrap();
            assert_eq!(emb.shape(), &[2, m.embedding_dim()]);
            assert_eq!(m.classify(&emb).unwrap(), l1);
        }
    }
}

#[test]
fn shape_mismatch_is_an_input_error() {
    let spec = ModelSpec::tiny(Arch::Baseline);
    let m = Model::build(&spec, 0).unwrap();
    let (img, _) = random_inputs(&spec, 2, 0);
    let (_, aud3) = random_inputs(&spec, 3, 0);
    assert!(matches!(m.forward(&img, &aud3), Err(Error::Input(_))));
    let wrong = Tensor::zeros(&[2, 8, 8, 3]);
    let (_, aud) = random_inputs(&spec, 2, 0);
    assert!(matches!(m.forward(&wrong, &aud), Err(Error::Input(_))));
}

/// Hand-assembled inference graph of the attention-free CNN+MLP topology,
/// reading parameters by name.
fn plain_cnn_mlp(m: &Model, img: &Tensor, aud: &Tensor) -> Tensor {
    let store = m.store();
    let mut g = Graph::new(store, false, 0);
    let p = |g: &mut Graph, n: &str| g.param(store.id(n).unwrap());
    let bn = |g: &mut Graph, x: NodeId, n: &str| {
        let (ga, be) = (p(g, &format!("{n}.gamma")), p(g, &format!("{n}.beta")));
        g.batch_norm(x, ga, be, store.bn_id(n).unwrap()).unwrap()
    };
    let mut x = g.input(img.clone());
    for i in 0..m.spec().conv_widths.len() {
        let (w, b) = (p(&mut g, &format!("img.conv{i}.w")), p(&mut g, &format!("img.conv{i}.b")));
        let h = g.conv(x, w, b).unwrap();
        let h = bn(&mut g, h, &format!("img.bn{i}"));
        let h = g.relu(h);
        x = g.max_pool(h).unwrap();
    }
    let f = g.flatten(x).unwrap();
    let dense = |g: &mut Graph, x: NodeId, n: &str| {
        let (w, b) = (p(g, &format!("{n}.w")), p(g, &format!("{n}.b")));
        g.dense(x, w, b).unwrap()
    };
    let h = dense(&mut g, f, "img.fc");
    let h = bn(&mut g, h, "img.fc_bn");
    let i = g.relu(h);
    let mut a = g.input(aud.clone());
    for j in 0..m.spec().audio_widths.len() {
        let h = dense(&mut g, a, &format!("aud.fc{j}"));
        let h = bn(&mut g, h, &format!("aud.bn{j}"));
        a = g.relu(h);
    }
    let c = g.concat(i, a).unwrap();
    let h = dense(&mut g, c, "head.fc");
    let h = bn(&mut g, h, "head.bn");
    let h = g.relu(h);
    let out = dense(&mut g, h, "out");
    g.value(out).clone()
}

#[test]
fn removing_attention_recovers_the_plain_graph() {
    for arch in [Arch::Attention, Arch::Block] {
        let spec = ModelSpec::tiny(arch);
        let m = Model::build(&spec, 5).unwrap();
        let (img, aud) = random_inputs(&spec, 3, 6);
        let bypass = m.forward_with(&img, &aud, ForwardOptions { bypass_attention: true }).unwrap();
        let plain = plain_cnn_mlp(&m, &img, &aud);
        assert_eq!(bypass.scores(), &plain, "{arch}");
        let full = m.forward(&img, &aud).unwrap();
        assert_ne!(full.scores(), &plain, "{arch} attention must matter");
    }
    // attention without its CBAM modules is the baseline on the same parameters
    let att = Model::build(&ModelSpec::tiny(Arch::Attention), 5).unwrap();
    let base = Model::build(&ModelSpec::tiny(Arch::Baseline), 5).unwrap();
    let (img, aud) = random_inputs(att.spec(), 3, 6);
    let bypass = att.forward_with(&img, &aud, ForwardOptions { bypass_attention: true }).unwrap();
    assert_eq!(bypass, base.forward(&img, &aud).unwrap());
}

#[test]
fn bnn_binarizes_all_but_first_conv_and_classifier() {
    let m = Model::build(&ModelSpec::paper(Arch::Bnn), 1).unwrap();
    let store = m.store();
    let mut binarized = 0;
    for (id, p) in store.params().iter().enumerate() {
        let is_weight = p.name.ends_with(".w");
        let exempt = p.name == "img.conv0.w" || p.name == "out.w";
        assert_eq!(p.binarized, is_weight && !exempt, "{}", p.name);
        if p.binarized {
            binarized += 1;
            let mut g = Graph::new(store, false, 0);
            let w = g.weight(id);
            assert!(g.value(w).data().iter().all(|&v| v == 1.0 || v == -1.0));
        }
    }
    assert_eq!(binarized, 6);
}

/// Central-difference check of the training-mode loss on 32 sampled
/// parameters.
fn check_end_to_end(arch: Arch) {
    let spec = ModelSpec::tiny(arch);
    let model = Model::build(&spec, 21).unwrap();
    let (img, aud) = random_inputs(&spec, 3, 22);
    let labels = [0, 4, 2];
    let loss_of = |m: &Model| -> f64 {
        let mut g = Graph::new(m.store(), true, 99);
        let heads = m.graph(&mut g, &img, &aud, ForwardOptions::default()).unwrap();
        let l = g.softmax_cross_entropy(heads.logits, &labels).unwrap();
        g.value(l).data()[0]
    };
    let grads = {
        let mut g = Graph::new(model.store(), true, 99);
        let heads = model.graph(&mut g, &img, &aud, ForwardOptions::default()).unwrap();
        let l = g.softmax_cross_entropy(heads.logits, &labels).unwrap();
        g.backward(l).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(arch as u64);
    let store = model.store();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..32 {
        let id = rng.gen_range(0..store.len());
        let idx = rng.gen_range(0..store.get(id).value.len());
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[idx]);
        let mut m = model.clone();
        let orig = store.get(id).value.data()[idx];
        m.store_mut().get_mut(id).value.data_mut()[idx] = orig + h;
        let fp = loss_of(&m);
        m.store_mut().get_mut(id).value.data_mut()[idx] = orig - h;
        let fm = loss_of(&m);
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            err < 1e-3,
            "{arch}: {}[{idx}] analytic {analytic} numeric {numeric}",
            store.get(id).name
        );
        worst = worst.max(err);
    }
    println!("{arch}: worst relative error {worst:.2e}");
}

#[test]
fn end_to_end_gradients_baseline() {
    check_end_to_end(Arch::Baseline);
}

#[test]
fn end_to_end_gradients_attention() {
    check_end_to_end(Arch::Attention);
}

#[test]
fn end_to_end_gradients_block() {
    check_end_to_end(Arch::Block);
}

#[test]
fn end_to_end_gradients_deconv_cbp() {
    check_end_to_end(Arch::DeconvCbp);
}

#[test]
fn end_to_end_gradients_xflow() {
    check_end_to_end(Arch::Xflow);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for arch in Arch::ALL {
        let spec = ModelSpec::tiny(arch);
        let mut m = Model::build(&spec, 2).unwrap();
        m.store_mut().bn_mut()[0].mean[0] = 0.125;
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(7));
        let bytes = encode_checkpoint(&m, &meta).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.metadata, meta);
        assert_eq!(ck.model.store(), m.store());
        assert_eq!(ck.model.sketch(), m.sketch());
        let (img, aud) = random_inputs(&spec, 2, 1);
        assert_eq!(ck.model.forward(&img, &aud).unwrap(), m.forward(&img, &aud).unwrap());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = Model::build(&ModelSpec::tiny(Arch::Baseline), 2).unwrap();
    let bytes = encode_checkpoint(&m, &BTreeMap::new()).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad_magic), Err(Error::Checkpoint(_))));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(decode_checkpoint(&bad_version), Err(Error::Checkpoint(_))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
}

#[test]
fn summary_lists_layers_and_total() {
    let m = Model::build(&ModelSpec::paper(Arch::Baseline), 0).unwrap();
    let s = m.summary();
    assert!(s.contains("img.conv0"));
    assert!(s.contains("2903557"));
}
