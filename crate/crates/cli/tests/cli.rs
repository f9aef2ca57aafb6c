use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn avguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avguard"))
        .args(args)
        .env_remove("AVGUARD_WORKSPACE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = avguard(args);
    assert!(
        out.status.success(),
        "avguard {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(avguard(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(avguard(&["report", "--bogus"]).status.code(), Some(2));
    assert_eq!(avguard(&["train", "--arch", "resnet50"]).status.code(), Some(2));
    assert_eq!(avguard(&["evaluate", "--checkpoint", "x", "--set", "weird"]).status.code(), Some(2));
    assert!(avguard(&["--help"]).status.success());
}

#[test]
fn config_validation_reports_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[dataset]\nanomaly_fraction = 1.5\n[train]\nbatch_size = 0\n").unwrap();
    let out = avguard(&["--config", s(&cfg), "--workspace", s(dir.path()), "config"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset.anomaly_fraction"), "{err}");
    assert!(err.contains("train.batch_size"), "{err}");

    std::fs::write(&cfg, "[train]\nbatchsize = 3\n").unwrap();
    assert_eq!(avguard(&["--config", s(&cfg), "config"]).status.code(), Some(1));

    let out = avguard(&["config"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("anomaly_fraction = 0.5"));

    let out = avguard(&["extract-features"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.workspace"));
}

#[test]
fn missing_corpus_prints_fetch_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let out = avguard(&["--workspace", s(&ws), "--speech-root", s(&dir.path().join("nope")), "extract-features"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("paths.speech_root") && err.contains("speech_commands"), "{err}");
}

fn manifest_references(ws: &Path) -> BTreeMap<String, usize> {
    let mut refs = BTreeMap::new();
    for e in std::fs::read_dir(ws.join("manifests")).unwrap() {
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(e.unwrap().path()).unwrap()).unwrap();
        for a in m["artifacts"].as_array().unwrap() {
            *refs.entry(a["path"].as_str().unwrap().to_string()).or_default() += 1;
        }
    }
    refs
}

fn files_under(root: &Path, rel: &Path, out: &mut Vec<String>) {
    for e in std::fs::read_dir(root.join(rel)).unwrap() {
        let e = e.unwrap();
        let r = rel.join(e.file_name());
        if e.path().is_dir() {
            files_under(root, &r, out);
        } else {
            out.push(r.to_string_lossy().into_owned());
        }
    }
}

fn build(corpus: &Path, ws: &Path, cfg: &Path) {
    ok(&[
        "--workspace",
        s(ws),
        "--config",
        s(cfg),
        "--speech-root",
        s(&corpus.join("speech")),
        "--gtsrb-root",
        s(&corpus.join("gtsrb")),
        "build-dataset",
        "--jobs",
        "2",
    ]);
}

#[test]
fn full_pipeline_on_synthetic_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth-corpus", "--out", s(&corpus), "--clips-per-class", "8", "--images-per-class", "10", "--seed", "4"]);

    let ws: PathBuf = dir.path().join("ws");
    std::fs::create_dir_all(&ws).unwrap();
    let cfg = ws.join("run.toml");
    std::fs::write(
        &cfg,
        "[dataset]\nimages_per_class = 10\nfolds = 2\nseed = 3\n\n[model]\nwidths = \"compact\"\nseed = 1\n\n\
         [train]\nepochs = 2\nbatch_size = 8\n\n[evaluation]\ntsne_perplexity = 3.0\ntsne_iterations = 50\ntsne_max_points = 40\n",
    )
    .unwrap();

    ok(&["--workspace", s(&ws), "--speech-root", s(&corpus.join("speech")), "extract-features", "--jobs", "1"]);
    build(&corpus, &ws, &cfg);
    let pairs = std::fs::read_to_string(ws.join("dataset/pairs.csv")).unwrap();
    assert!(pairs.starts_with("pair_id,audio_path,image_id,audio_class,image_class,target,fold"));
    assert_eq!(pairs.lines().count(), 1 + 32 + 16);

    let ws2 = dir.path().join("ws2");
    std::fs::create_dir_all(&ws2).unwrap();
    build(&corpus, &ws2, &cfg);
    assert_eq!(std::fs::read(ws2.join("dataset/aid.bin")).unwrap(), std::fs::read(ws.join("dataset/aid.bin")).unwrap());
    assert_eq!(std::fs::read_to_string(ws2.join("dataset/pairs.csv")).unwrap(), pairs);

    // run.toml is picked up from the workspace without --config.
    let out = ok(&["--workspace", s(&ws), "train", "--arch", "baseline"]);
    assert!(out.contains("best epoch"), "{out}");
    let run = ws.join("runs/baseline");
    assert!(run.join("best.ckpt").is_file());
    assert!(run.join("history.json").is_file());
    assert_eq!(std::fs::read_to_string(run.join("train-log.jsonl")).unwrap().lines().count(), 2);

    let ck = run.join("best.ckpt");
    ok(&["--workspace", s(&ws), "evaluate", "--checkpoint", s(&ck), "--set", "normal"]);
    let out = ok(&["--workspace", s(&ws), "evaluate", "--checkpoint", s(&ck), "--set", "attack"]);
    assert!(out.contains("attack success rate"));
    ok(&["--workspace", s(&ws), "visualize-tsne", "--checkpoint", s(&ck)]);
    assert!(ws.join("tsne/baseline.png").is_file());

    let out = ok(&["--workspace", s(&ws), "report"]);
    for set in ["normal", "attack"] {
        let r: serde_json::Value =
            serde_json::from_slice(&std::fs::read(ws.join(format!("eval/baseline-{set}.json"))).unwrap()).unwrap();
        let acc = format!("{:.2}", 100.0 * r["accuracy"].as_f64().unwrap());
        let row = out
            .lines()
            .skip_while(|l| !l.contains(if set == "normal" { "without attack" } else { "under attack" }))
            .find(|l| l.starts_with("CNN_MLP_Baseline"))
            .unwrap();
        assert!(row.contains(&acc), "{row} lacks {acc}");
    }
    assert!(out.contains("not evaluated"));

    // Every artifact is referenced by exactly one manifest.
    let refs = manifest_references(&ws);
    let mut files = Vec::new();
    files_under(&ws, Path::new(""), &mut files);
    files.retain(|f| !f.starts_with("manifests") && f != "run.toml");
    assert!(!files.is_empty());
    for f in &files {
        assert_eq!(refs.get(f), Some(&1), "{f}");
    }
    assert_eq!(refs.len(), files.len());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ws.join("manifests/train-baseline.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["model"], 1);
    assert!(m["dataset_hash"].as_str().unwrap().len() == 64);
    assert!(ok(&["--workspace", s(&ws), "manifests"]).contains("train-baseline"));

    // Retraining replaces the run folder and its manifest together.
    ok(&["--workspace", s(&ws), "train", "--arch", "baseline", "--epochs", "1"]);
    let refs = manifest_references(&ws);
    assert!(refs.keys().all(|k| ws.join(k).is_file()));
}
