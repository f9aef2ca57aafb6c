use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avguard::audio_dsp::{extract_features, AudioClip, CLIP_LEN, SAMPLE_RATE};
use avguard::evaluation::{tsne_3d, TsneConfig};
use avguard::fusion_ops::{CompactBilinear, SketchParams};
use avguard::models::{Arch, Model, ModelSpec};
use avguard::{Exec, Tensor};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn mfcc_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clips: Vec<AudioClip> = (0..32)
        .map(|_| AudioClip::new(random(CLIP_LEN, &mut rng), SAMPLE_RATE, None).unwrap())
        .collect();
    let mut g = c.benchmark_group("mfcc_batch_32");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| extract_features(&clips, exec).unwrap()));
    }
    g.finish();
}

fn cbp_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cbp = CompactBilinear::new(SketchParams::draw(128, 128, 8192, 3).unwrap()).unwrap();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..64).map(|_| (random(128, &mut rng), random(128, &mut rng))).collect();
    let mut g = c.benchmark_group("cbp_batch_64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(&pairs, |(x, y)| cbp.pool(x, y).unwrap()))
        });
    }
    g.finish();
}

fn tsne(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = Tensor::from_vec(&[300, 32], random(300 * 32, &mut rng)).unwrap();
    let cfg = TsneConfig {
        iterations: 50,
        ..TsneConfig::default()
    };
    let mut g = c.benchmark_group("tsne_300");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| tsne_3d(&data, &cfg, exec).unwrap()));
    }
    g.finish();
}

/// Layers pick the default mode internally, so the sequential case runs
/// inside a one-thread pool.
fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::build(&ModelSpec::paper(Arch::Baseline), 0).unwrap();
    let images = Tensor::from_vec(&[16, 64, 64, 3], random(16 * 64 * 64 * 3, &mut rng)).unwrap();
    let audio = Tensor::from_vec(&[16, 1000], random(16 * 1000, &mut rng)).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut g = c.benchmark_group("baseline_forward_16");
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| single.install(|| model.forward(&images, &audio).unwrap()))
    });
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| {
        b.iter(|| model.forward(&images, &audio).unwrap())
    });
    g.finish();
}

criterion_group!(benches, mfcc_batch, cbp_batch, tsne, forward);
criterion_main!(benches);
