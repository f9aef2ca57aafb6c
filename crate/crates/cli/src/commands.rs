//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avguard::audio_dsp::store::{read_feature_store, write_feature_store, FeatureRecord, BIN_NAME};
use avguard::dataset::synth::{write_sign_corpus, write_speech_corpus};
use avguard::dataset::{
    build_aid, feature_records, load_sign_images, load_speech_corpus, split_folds, AidConfig, PairedDataset,
};
use avguard::evaluation::{
    embed_penultimate, evaluate, render_scatter_png, silhouette_score, tsne_3d, write_report, write_tsne_csv,
    EvalReport, EvalSet, Report, TsneConfig,
};
use avguard::fsutil::write_atomic;
use avguard::models::{load_checkpoint, save_checkpoint, Arch, Model};
use avguard::training::{cross_validate, train, TrainOutputs};
use avguard::{CommandClass, Exec};
use serde_json::json;

use crate::config::{check_gtsrb_root, check_speech_root, RunConfig};
use crate::workspace::{list_files, read_manifest, reset_dir, Manifest, Workspace};

/// Runs `f` with `jobs` worker threads (all cores when `None`).
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce(Exec) -> R + Send) -> Result<R> {
    match jobs {
        Some(1) => Ok(f(Exec::Sequential)),
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(|| f(Exec::Parallel)))
        }
        _ => Ok(f(Exec::default())),
    }
}

pub fn synth_corpus(cfg: &RunConfig, out: &Path, clips: usize, images: usize, seed: u64) -> Result<()> {
    let map = cfg.class_map().map_err(crate::config::ConfigErrors)?;
    let speech = out.join("speech");
    let gtsrb = out.join("gtsrb");
    for d in [&speech, &gtsrb] {
        reset_dir(d)?;
    }
    write_speech_corpus(&speech, clips, seed)?;
    write_sign_corpus(&gtsrb, &map, images, seed)?;
    let ws = Workspace::new(out.to_path_buf());
    let mut m = Manifest::new("synth-corpus", cfg)
        .seed("corpus", seed)
        .input("clips_per_class", clips.to_string())
        .input("images_per_class", images.to_string());
    let mut files = list_files(&speech)?;
    files.extend(list_files(&gtsrb)?);
    m.add_files(&ws, &files)?;
    m.write(&ws, "synth-corpus")?;
    println!("speech corpus: {}", speech.display());
    println!("sign corpus:   {}", gtsrb.display());
    Ok(())
}

fn extract(cfg: &RunConfig, jobs: Option<usize>) -> Result<Vec<FeatureRecord>> {
    let root = check_speech_root(cfg)?;
    let per_class = cfg.dataset.clips_per_class;
    with_jobs(jobs, move |exec| -> Result<Vec<FeatureRecord>> {
        let clips = load_speech_corpus(&root, per_class, exec)?;
        log::info!("extracting MFCC features from {} clips", clips.len());
        Ok(feature_records(&clips, exec)?)
    })?
}

pub fn extract_features(ws: &Workspace, cfg: &RunConfig, jobs: Option<usize>) -> Result<()> {
    let records = extract(cfg, jobs)?;
    let dir = ws.features_dir();
    reset_dir(&dir)?;
    let files = write_feature_store(&dir, &records)?;
    let mut m = Manifest::new("extract-features", cfg).input(
        "speech_root",
        cfg.paths.speech_root.as_deref().unwrap_or(Path::new("")).display().to_string(),
    );
    m.add_files(ws, &files)?;
    m.write(ws, "features")?;
    println!("{} feature rows written to {}", records.len(), dir.display());
    Ok(())
}

/// Keeps the first `limit` records of each class, in stored order.
fn cap_per_class(records: Vec<FeatureRecord>, limit: Option<usize>) -> Vec<FeatureRecord> {
    let Some(limit) = limit else { return records };
    let mut seen: BTreeMap<CommandClass, usize> = BTreeMap::new();
    records
        .into_iter()
        .filter(|r| {
            let n = seen.entry(r.class).or_default();
            *n += 1;
            *n <= limit
        })
        .collect()
}

pub fn build_dataset(ws: &Workspace, cfg: &RunConfig, jobs: Option<usize>) -> Result<()> {
    let map = cfg.class_map().map_err(crate::config::ConfigErrors)?;
    let gtsrb = check_gtsrb_root(cfg)?;
    let store = ws.features_dir();
    let (audio, source) = if store.join(BIN_NAME).is_file() {
        let records = cap_per_class(read_feature_store(&store)?, cfg.dataset.clips_per_class);
        (records, format!("workspace:{}", ws.relative(&store)))
    } else {
        (extract(cfg, jobs)?, cfg.paths.speech_root.as_deref().unwrap_or(Path::new("")).display().to_string())
    };
    let quota = cfg.dataset.images_per_class;
    let images = with_jobs(jobs, |exec| load_sign_images(&gtsrb, &map, quota, exec))??;
    let d = &cfg.dataset;
    let ds = build_aid(
        audio,
        images,
        AidConfig {
            anomaly_fraction: d.anomaly_fraction,
            seed: d.seed,
        },
    )?;
    let folds = split_folds(&ds, d.folds, d.seed)?;
    let dir = ws.dataset_dir();
    reset_dir(&dir)?;
    let bin = ws.dataset_file();
    let csv = dir.join("pairs.csv");
    write_atomic(&bin, &ds.encode())?;
    ds.write_manifest(&csv, Some(&folds))?;
    let hash = ds.content_hash();
    let mut m = Manifest::new("build-dataset", cfg)
        .seed("dataset", d.seed)
        .seed("folds", d.seed)
        .input("audio", source)
        .input("gtsrb_root", gtsrb.display().to_string());
    m.dataset_hash = Some(hash.clone());
    m.add_files(ws, &[bin, csv])?;
    m.write(ws, "dataset")?;
    println!("{} pairs ({} audio clips, {} images), {} folds", ds.len(), ds.audio().len(), ds.images().len(), d.folds);
    for (t, n) in ds.class_counts() {
        println!("  {t:<8} {n}");
    }
    println!("dataset hash {hash}");
    Ok(())
}

fn load_dataset(ws: &Workspace) -> Result<PairedDataset> {
    let path = ws.dataset_file();
    if !path.is_file() {
        bail!("no dataset at {}; run `avguard build-dataset` first", path.display());
    }
    let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(PairedDataset::decode(&bytes)?)
}

pub fn train_arch(ws: &Workspace, cfg: &RunConfig, arch: Arch, cv: bool) -> Result<()> {
    let ds = load_dataset(ws)?;
    let folds = split_folds(&ds, cfg.dataset.folds, cfg.dataset.seed)?;
    let spec = cfg.model_spec(arch);
    spec.validate()?;
    let tc = cfg.train_config();
    let dir = ws.run_dir(arch.id());
    reset_dir(&dir)?;
    let hash = ds.content_hash();
    let mut m = Manifest::new("train", cfg)
        .seed("dataset", cfg.dataset.seed)
        .seed("model", cfg.model.seed)
        .seed("train", tc.seed)
        .input("arch", arch.id());
    m.dataset_hash = Some(hash.clone());
    if cv {
        let r = cross_validate(&spec, cfg.model.seed, &ds, &folds, &tc, Some(&dir))?;
        write_atomic(&dir.join("cv.json"), &serde_json::to_vec_pretty(&r)?)?;
        println!(
            "{}: {}-fold accuracy {:.2}% +/- {:.2}",
            arch.network_name(),
            folds.k(),
            100.0 * r.mean,
            100.0 * r.std
        );
    } else {
        let f = cfg.train.fold;
        let metadata = BTreeMap::from([
            ("arch".to_string(), json!(arch.id())),
            ("fold".to_string(), json!(f)),
            ("dataset_hash".to_string(), json!(hash)),
            ("config_hash".to_string(), json!(cfg.hash())),
        ]);
        let out = TrainOutputs {
            checkpoint_dir: Some(dir.clone()),
            log_path: Some(dir.join("train-log.jsonl")),
            metadata: metadata.clone(),
        };
        let model = Model::build(&spec, cfg.model.seed)?;
        log::info!("{}: {} parameters", arch.network_name(), model.param_count());
        let o = train(model, &ds, &folds.train(f), &folds.fold(f), &tc, &out)?;
        let best = &o.history[o.best_epoch];
        let mut meta = metadata;
        meta.insert("epoch".into(), json!(best.epoch));
        meta.insert("val_accuracy".into(), json!(best.val_accuracy));
        save_checkpoint(&dir.join("best.ckpt"), &o.best_model, &meta)?;
        write_atomic(&dir.join("history.json"), &serde_json::to_vec_pretty(&o.history)?)?;
        println!(
            "{}: best epoch {} with validation accuracy {:.2}%",
            arch.network_name(),
            best.epoch,
            100.0 * best.val_accuracy
        );
    }
    m.add_files(ws, &list_files(&dir)?)?;
    m.write(ws, &format!("train-{}", arch.id()))?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

/// Restores a checkpoint and the held-out fold it was validated on.
fn checkpoint_and_fold(ws: &Workspace, cfg: &RunConfig, path: &Path) -> Result<(Model, PairedDataset, Vec<usize>, String)> {
    let ck = load_checkpoint(path)?;
    let ds = load_dataset(ws)?;
    let hash = ds.content_hash();
    match ck.metadata.get("dataset_hash").and_then(|v| v.as_str()) {
        Some(h) if h != hash => log::warn!("{} was trained on a different dataset ({h})", path.display()),
        _ => {}
    }
    let fold = ck
        .metadata
        .get("fold")
        .and_then(|v| v.as_u64())
        .map_or(cfg.train.fold, |f| f as usize);
    let folds = split_folds(&ds, cfg.dataset.folds, cfg.dataset.seed)?;
    if fold >= folds.k() {
        bail!("checkpoint fold {fold} does not exist with {} folds", folds.k());
    }
    Ok((ck.model, ds, folds.fold(fold), hash))
}

pub fn evaluate_checkpoint(ws: &Workspace, cfg: &RunConfig, checkpoint: &Path, set: EvalSet) -> Result<()> {
    let (model, ds, held_out, hash) = checkpoint_and_fold(ws, cfg, checkpoint)?;
    let r = evaluate(&model, &ds, &held_out, set, cfg.evaluation.batch_size)?;
    let arch = model.arch().id();
    let path = ws.eval_dir().join(format!("{arch}-{set}.json"));
    write_atomic(&path, &serde_json::to_vec_pretty(&r)?)?;
    let run = format!("evaluate-{arch}-{set}");
    let mut m = Manifest::new("evaluate", cfg)
        .seed("dataset", cfg.dataset.seed)
        .input("checkpoint", checkpoint.display().to_string())
        .input("set", set.name());
    m.dataset_hash = Some(hash);
    m.add_files(ws, &[path])?;
    m.write(ws, &run)?;
    println!(
        "{} on {} pairs ({}): accuracy {:.2}%, precision {:.2}%, recall {:.2}%, f1 {:.2}%",
        r.network,
        set,
        r.samples,
        100.0 * r.accuracy,
        100.0 * r.precision,
        100.0 * r.recall,
        100.0 * r.f1
    );
    if let Some(asr) = r.attack_success_rate {
        println!("attack success rate {:.2}%", 100.0 * asr);
    }
    Ok(())
}

pub fn visualize_tsne(ws: &Workspace, cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (model, ds, mut held_out, hash) = checkpoint_and_fold(ws, cfg, checkpoint)?;
    let e = &cfg.evaluation;
    held_out.truncate(e.tsne_max_points);
    let emb = embed_penultimate(&model, &ds, &held_out, e.batch_size)?;
    let tc = TsneConfig {
        perplexity: e.tsne_perplexity,
        iterations: e.tsne_iterations,
        seed: e.tsne_seed,
        ..TsneConfig::default()
    };
    let r = tsne_3d(&emb.embeddings, &tc, Exec::default())?;
    let silhouette = silhouette_score(&r.points, &emb.labels, Exec::default())?;
    let arch = model.arch().id();
    let dir = ws.tsne_dir();
    let csv = dir.join(format!("{arch}.csv"));
    let png = dir.join(format!("{arch}.png"));
    write_tsne_csv(&csv, &r.points, &emb.labels)?;
    render_scatter_png(&png, &r.points, &emb.labels)?;
    let mut m = Manifest::new("visualize-tsne", cfg)
        .seed("tsne", e.tsne_seed)
        .input("checkpoint", checkpoint.display().to_string())
        .input("points", held_out.len().to_string());
    m.dataset_hash = Some(hash);
    m.add_files(ws, &[csv, png])?;
    m.write(ws, &format!("tsne-{arch}"))?;
    println!(
        "{} points: KL {:.4} -> {:.4}, silhouette {:.3}; written to {}",
        held_out.len(),
        r.initial_kl,
        r.final_kl,
        silhouette,
        dir.display()
    );
    Ok(())
}

pub fn report(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let dir = ws.eval_dir();
    let mut files: Vec<PathBuf> = if dir.is_dir() { list_files(&dir)? } else { Vec::new() };
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    if files.is_empty() {
        bail!("no evaluations under {}; run `avguard evaluate` first", dir.display());
    }
    let mut report = Report::default();
    let mut m = Manifest::new("report", cfg);
    for f in &files {
        let bytes = std::fs::read(f).with_context(|| format!("cannot read {}", f.display()))?;
        let r: EvalReport = serde_json::from_slice(&bytes).with_context(|| format!("malformed {}", f.display()))?;
        report.add(&r);
        m = m.input(&ws.relative(f), avguard::fsutil::sha256_hex(&bytes));
    }
    let out = ws.report_dir();
    reset_dir(&out)?;
    let json_path = out.join("report.json");
    let txt_path = out.join("report.txt");
    write_report(&json_path, &report)?;
    let text = report.to_text();
    write_atomic(&txt_path, text.as_bytes())?;
    m.add_files(ws, &[json_path, txt_path])?;
    m.write(ws, "report")?;
    print!("{text}");
    let missing: Vec<&str> = Arch::ALL
        .iter()
        .filter(|a| !report.tables.values().any(|rows| rows.contains_key(a.network_name())))
        .map(|a| a.network_name())
        .collect();
    if !missing.is_empty() {
        println!("not evaluated: {}", missing.join(", "));
    }
    Ok(())
}

/// Lists the manifests in a workspace.
pub fn manifests(ws: &Workspace) -> Result<()> {
    let dir = ws.root().join("manifests");
    if !dir.is_dir() {
        println!("no manifests under {}", dir.display());
        return Ok(());
    }
    for p in list_files(&dir)? {
        let m = read_manifest(&p)?;
        println!("{:<32} {:>3} artifacts  config {}", ws.relative(&p), m.artifacts.len(), &m.config_hash[..12]);
    }
    Ok(())
}
