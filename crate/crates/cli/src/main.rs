//! `avguard`: build the paired audio-image dataset, train the fusion
//! networks and evaluate them with and without attack.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use avguard::evaluation::EvalSet;
use avguard::models::Arch;
use clap::{Parser, Subcommand};

use config::{ConfigErrors, RunConfig, Widths};
use workspace::Workspace;

#[derive(Parser, Debug)]
#[command(name = "avguard", version, about = "Audio-visual defense against inaudible voice commands")]
struct Cli {
    /// Workspace holding every artifact of a run.
    #[arg(long, global = true, env = "AVGUARD_WORKSPACE")]
    workspace: Option<PathBuf>,
    /// TOML run configuration; defaults to `<workspace>/run.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    speech_root: Option<PathBuf>,
    #[arg(long, global = true)]
    gtsrb_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write small synthetic speech and sign corpora in the real on-disk layouts.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 300)]
        images_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute MFCC features for the speech corpus.
    ExtractFeatures {
        /// Worker threads.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: Option<u32>,
        #[arg(long)]
        clips_per_class: Option<usize>,
    },
    /// Pair clips with sign images and assign folds.
    BuildDataset {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: Option<u32>,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        images_per_class: Option<usize>,
        #[arg(long)]
        anomaly_fraction: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one architecture on the built dataset.
    Train {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Held-out fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model_seed: Option<u64>,
        #[arg(long)]
        widths: Option<Widths>,
        /// Train one model per fold instead of a single split.
        #[arg(long)]
        cross_validate: bool,
    },
    /// Score a checkpoint on its held-out fold.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        set: EvalSet,
    },
    /// Embed the held-out fold and project it to 3-D with t-SNE.
    VisualizeTsne {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        max_points: Option<usize>,
    },
    /// Tabulate every stored evaluation.
    Report,
    /// Print the effective configuration as TOML.
    Config,
    /// List the run manifests in the workspace.
    Manifests,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let default_path = cli.workspace.as_ref().map(|w| w.join("run.toml"));
    let mut cfg = match (&cli.config, default_path) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    if let Some(w) = &cli.workspace {
        cfg.paths.workspace = Some(w.clone());
    }
    if let Some(p) = &cli.speech_root {
        cfg.paths.speech_root = Some(p.clone());
    }
    if let Some(p) = &cli.gtsrb_root {
        cfg.paths.gtsrb_root = Some(p.clone());
    }
    let d = &mut cfg.dataset;
    match &cli.command {
        Command::ExtractFeatures { clips_per_class, .. } => {
            d.clips_per_class = clips_per_class.or(d.clips_per_class);
        }
        Command::BuildDataset {
            clips_per_class,
            images_per_class,
            anomaly_fraction,
            folds,
            seed,
            ..
        } => {
            d.clips_per_class = clips_per_class.or(d.clips_per_class);
            d.images_per_class = images_per_class.unwrap_or(d.images_per_class);
            d.anomaly_fraction = anomaly_fraction.unwrap_or(d.anomaly_fraction);
            d.folds = folds.unwrap_or(d.folds);
            d.seed = seed.unwrap_or(d.seed);
        }
        Command::Train {
            epochs,
            batch_size,
            learning_rate,
            fold,
            seed,
            model_seed,
            widths,
            ..
        } => {
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            t.fold = fold.unwrap_or(t.fold);
            t.seed = seed.unwrap_or(t.seed);
            cfg.model.seed = model_seed.unwrap_or(cfg.model.seed);
            cfg.model.widths = widths.unwrap_or(cfg.model.widths);
        }
        Command::VisualizeTsne {
            perplexity,
            iterations,
            max_points,
            ..
        } => {
            let e = &mut cfg.evaluation;
            e.tsne_perplexity = perplexity.unwrap_or(e.tsne_perplexity);
            e.tsne_iterations = iterations.unwrap_or(e.tsne_iterations);
            e.tsne_max_points = max_points.unwrap_or(e.tsne_max_points);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workspace(cfg: &RunConfig) -> Result<Workspace> {
    let root = cfg.paths.workspace.clone().ok_or_else(|| {
        anyhow!(ConfigErrors(vec![config::FieldError {
            field: "paths.workspace".into(),
            message: "not set; pass --workspace, set AVGUARD_WORKSPACE or add it to the config".into(),
        }]))
    })?;
    std::fs::create_dir_all(&root).map_err(|e| anyhow!("cannot create workspace {}: {e}", root.display()))?;
    Ok(Workspace::new(root))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let jobs = |j: &Option<u32>| j.map(|n| n as usize);
    match &cli.command {
        Command::SynthCorpus {
            out,
            clips_per_class,
            images_per_class,
            seed,
        } => commands::synth_corpus(&cfg, out, *clips_per_class, *images_per_class, *seed),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::ExtractFeatures { jobs: j, .. } => commands::extract_features(&workspace(&cfg)?, &cfg, jobs(j)),
        Command::BuildDataset { jobs: j, .. } => commands::build_dataset(&workspace(&cfg)?, &cfg, jobs(j)),
        Command::Train { arch, cross_validate, .. } => {
            commands::train_arch(&workspace(&cfg)?, &cfg, *arch, *cross_validate)
        }
        Command::Evaluate { checkpoint, set } => commands::evaluate_checkpoint(&workspace(&cfg)?, &cfg, checkpoint, *set),
        Command::VisualizeTsne { checkpoint, .. } => commands::visualize_tsne(&workspace(&cfg)?, &cfg, checkpoint),
        Command::Report => commands::report(&workspace(&cfg)?, &cfg),
        Command::Manifests => commands::manifests(&workspace(&cfg)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<ConfigErrors>() {
                Some(c) => eprint!("error: {c}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}
