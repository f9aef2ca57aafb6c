use avguard::audio_dsp::store::FeatureRecord;
use avguard::audio_dsp::{FeatureVector, FEATURE_DIM};
use avguard::dataset::{build_aid, AidConfig, ImageSample, IMAGE_SIDE};
use avguard::evaluation::{
    anomaly_recall, attack_success_rate, confusion_on, embed_penultimate, evaluate, read_report, render_scatter_png,
    silhouette_score, tsne_3d, weighted_metrics, write_report, write_tsne_csv, ConfusionMatrix, EvalSet, Report,
    TsneConfig,
};
use avguard::models::{Arch, Model, ModelSpec};
use avguard::{CommandClass, Error, Exec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn confusion_matrix_tallies() {
    let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
    let cm = ConfusionMatrix::from_predictions(&labels, &labels, 5).unwrap();
    assert_eq!(cm.trace(), 10);
    let (a, b) = (0, 1);
    let cm = ConfusionMatrix::from_predictions(&[a, a, b], &[a, b, b], 2).unwrap();
    assert_eq!((cm.get(a, a), cm.get(b, a), cm.get(b, b), cm.get(a, b)), (1, 1, 1, 0));
    let empty = ConfusionMatrix::from_predictions(&[], &[], 5).unwrap();
    assert_eq!(empty, ConfusionMatrix::new(5));
    assert!(matches!(ConfusionMatrix::from_predictions(&[0], &[5], 5), Err(Error::Input(_))));
}

#[test]
fn weighted_metrics_hand_fixture() {
    let cm = ConfusionMatrix::from_predictions(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
    let m = weighted_metrics(&cm).unwrap();
    assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.per_class[0].recall, 1.0);
    assert_eq!(m.per_class[1].recall, 0.5);
    assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
    let perfect = ConfusionMatrix::from_predictions(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
    let m = weighted_metrics(&perfect).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    let wrong = ConfusionMatrix::from_predictions(&[1, 2, 0], &[0, 1, 2], 3).unwrap();
    assert_eq!(weighted_metrics(&wrong).unwrap().accuracy, 0.0);
    assert!(weighted_metrics(&ConfusionMatrix::new(3)).is_err());
}

/// Metrics computed straight from the prediction/label lists.
fn oracle(preds: &[usize], labels: &[usize], k: usize) -> [f64; 4] {
    let n = labels.len() as f64;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    let mut correct = 0.0;
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&pr, &l) in preds.iter().zip(labels) {
            match (pr == c, l == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        correct += tp;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        let support = tp + fneg;
        p += support * prec;
        r += support * rec;
        f += support * f1;
    }
    [correct / n, p / n, r / n, f / n]
}

#[test]
fn weighted_metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.gen_bool(0.6) { l } else { rng.gen_range(0..5) })
            .collect();
        let m = weighted_metrics(&ConfusionMatrix::from_predictions(&preds, &labels, 5).unwrap()).unwrap();
        let o = oracle(&preds, &labels, 5);
        for (got, want) in [m.accuracy, m.precision, m.recall, m.f1].into_iter().zip(o) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}

fn anomaly_matrix(detected: u64, missed: u64) -> ConfusionMatrix {
    let mut preds = vec![4; detected as usize];
    preds.extend(std::iter::repeat_n(1, missed as usize));
    let labels = vec![4; preds.len()];
    ConfusionMatrix::from_predictions(&preds, &labels, 5).unwrap()
}

#[test]
fn attack_success_rate_fixtures() {
    let cm = anomaly_matrix(892, 108);
    assert!((anomaly_recall(&cm).unwrap() - 0.892).abs() < 1e-15);
    assert!((attack_success_rate(&cm).unwrap() - 0.108).abs() < 1e-12);
    assert_eq!(attack_success_rate(&anomaly_matrix(10, 0)).unwrap(), 0.0);
    assert!((attack_success_rate(&anomaly_matrix(7, 3)).unwrap() - 0.3).abs() < 1e-12);
    let normal_only = ConfusionMatrix::from_predictions(&[0, 1], &[0, 1], 5).unwrap();
    assert!(attack_success_rate(&normal_only).is_err());
}

#[test]
fn attack_success_plus_recall_is_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let total = rng.gen_range(1..5000u64);
        let detected = rng.gen_range(0..=total);
        let cm = anomaly_matrix(detected, total - detected);
        assert_eq!(attack_success_rate(&cm).unwrap() + anomaly_recall(&cm).unwrap(), 1.0);
    }
}

fn small_aid() -> avguard::dataset::PairedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let audio = CommandClass::ALL
        .into_iter()
        .flat_map(|c| (0..4).map(move |i| (c, i)))
        .map(|(class, i)| FeatureRecord {
            clip_id: format!("{i}"),
            class,
            source: String::new(),
            features: FeatureVector::new((0..FEATURE_DIM).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap(),
        })
        .collect();
    let images = CommandClass::ALL
        .into_iter()
        .map(|c| {
            let rgb = (0..IMAGE_SIDE * IMAGE_SIDE * 3).map(|v| (v * (c.index() + 3)) as u8).collect();
            ImageSample::from_rgb(rgb, c, c.name().into()).unwrap()
        })
        .collect();
    build_aid(audio, images, AidConfig { anomaly_fraction: 0.5, seed: 1 }).unwrap()
}

#[test]
fn normal_and_attack_merge_to_mixed() {
    let ds = small_aid();
    let model = Model::build(&ModelSpec::paper(Arch::Baseline), 3).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let normal = EvalSet::Normal.select(&ds, &all);
    let attack = EvalSet::Attack.select(&ds, &all);
    assert_eq!(normal.len() + attack.len(), ds.len());
    let mut merged = confusion_on(&model, &ds, &normal, 7).unwrap();
    merged.merge(&confusion_on(&model, &ds, &attack, 7).unwrap()).unwrap();
    let mixed = evaluate(&model, &ds, &all, EvalSet::Mixed, 7).unwrap();
    assert_eq!(merged, mixed.confusion);
    let att = evaluate(&model, &ds, &all, EvalSet::Attack, 7).unwrap();
    assert_eq!(att.samples, attack.len());
    assert_eq!(att.attack_success_rate.unwrap() + att.anomaly_recall.unwrap(), 1.0);
    let nor = evaluate(&model, &ds, &all, EvalSet::Normal, 7).unwrap();
    assert!(nor.attack_success_rate.is_none());
}

#[test]
fn penultimate_embeddings() {
    let ds = small_aid();
    let model = Model::build(&ModelSpec::paper(Arch::Xflow), 3).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let e1 = embed_penultimate(&model, &ds, &idx, 5).unwrap();
    let e2 = embed_penultimate(&model, &ds, &idx, 5).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.embeddings.shape(), &[ds.len(), 128]);
    let (img, aud, _) = ds.batch(&idx);
    assert_eq!(model.classify(&e1.embeddings).unwrap(), model.forward(&img, &aud).unwrap());
    let tiny = Model::build(&ModelSpec::tiny(Arch::Baseline), 3).unwrap();
    assert!(matches!(embed_penultimate(&tiny, &ds, &idx, 5), Err(Error::Input(_))));
}

fn two_clusters(per: usize, dim: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(2 * per * dim);
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..per {
            for k in 0..dim {
                let offset = if c == 1 && k == 0 { 10.0 } else { 0.0 };
                data.push(offset + rng.sample(normal));
            }
            labels.push(c);
        }
    }
    (Tensor::from_vec(&[2 * per, dim], data).unwrap(), labels)
}

#[test]
fn tsne_separates_two_clusters() {
    let (x, labels) = two_clusters(200, 64, 1);
    let cfg = TsneConfig { seed: 3, ..TsneConfig::default() };
    let r = tsne_3d(&x, &cfg, Exec::default()).unwrap();
    assert_eq!(r.points.shape(), &[400, 3]);
    assert!(r.final_kl < r.initial_kl, "{} -> {}", r.initial_kl, r.final_kl);
    assert!(r.perplexities.iter().all(|p| (p - 30.0).abs() <= 1e-5));
    let s = silhouette_score(&r.points, &labels, Exec::default()).unwrap();
    println!("silhouette {s:.3}, KL {:.3} -> {:.3}", r.initial_kl, r.final_kl);
    assert!(s > 0.5);
}

#[test]
fn tsne_is_deterministic_across_exec_modes() {
    let (x, _) = two_clusters(50, 8, 2);
    let cfg = TsneConfig { seed: 1, iterations: 60, perplexity: 10.0, ..TsneConfig::default() };
    let a = tsne_3d(&x, &cfg, Exec::Sequential).unwrap();
    let b = tsne_3d(&x, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a.points, b.points);
}

#[test]
fn tsne_input_errors() {
    let (x, _) = two_clusters(40, 4, 0);
    assert!(matches!(tsne_3d(&x, &TsneConfig::default(), Exec::default()), Err(Error::Input(_))));
    let mut bad = Tensor::zeros(&[100, 2]);
    bad.data_mut()[3] = f64::NAN;
    assert!(matches!(tsne_3d(&bad, &TsneConfig::default(), Exec::default()), Err(Error::Input(_))));
}

#[test]
fn report_and_plot_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_aid();
    let model = Model::build(&ModelSpec::paper(Arch::Baseline), 3).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut report = Report::default();
    report.add(&evaluate(&model, &ds, &all, EvalSet::Normal, 8).unwrap());
    report.add(&evaluate(&model, &ds, &all, EvalSet::Attack, 8).unwrap());
    let path = dir.path().join("report.json");
    write_report(&path, &report).unwrap();
    assert_eq!(read_report(&path).unwrap(), report);
    assert!(report.to_text().contains("CNN_MLP_Baseline"));

    let (x, labels) = two_clusters(3, 3, 0);
    write_tsne_csv(&dir.path().join("t.csv"), &x, &labels).unwrap();
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(text.starts_with("x,y,z,label\n"));
    assert_eq!(text.lines().count(), 7);
    render_scatter_png(&dir.path().join("t.png"), &x, &labels).unwrap();
    assert!(image::open(dir.path().join("t.png")).is_ok());
}
