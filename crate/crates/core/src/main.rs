use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use docrep::evalsuite::{run_protocol, Task};
use docrep::pipeline::extract::{self, train_feature_pca, train_gmm, train_local_pca};
use docrep::pipeline::{
    load_manifest, synth_docs, Descriptor, Encoder, FeatureSet, ModelSet, SavedModel, Settings,
};
use docrep::predict::{select_svm_lambda, LAMBDA_GRID};
use docrep::{Error, Result};

#[derive(Parser)]
#[command(name = "docrep", version, about = "Document image representations and transfer evaluation")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable: `--set mlp.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic template corpus and its manifest.
    SynthDocs(SynthArgs),
    /// Compute one descriptor for every image of a manifest.
    Extract(ExtractArgs),
    /// Fit PCA on SIFT samples from a manifest or on a feature set.
    TrainPca(TrainPcaArgs),
    /// Fit the GMM vocabulary on local descriptors from a manifest.
    TrainGmm(TrainGmmArgs),
    /// Train the fully connected layers on a labeled feature set.
    TrainMlp(TrainMlpArgs),
    /// Train a one-vs-rest linear SVM on a labeled feature set.
    TrainSvm(TrainSvmArgs),
    /// Run a transfer task over repeated half splits.
    Eval(EvalArgs),
    /// Classify every row of a feature set.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// rl, fv4, fv16, fv256, fv256pca or hybrid-act.
    #[arg(long)]
    descriptor: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    local_pca: Option<PathBuf>,
    #[arg(long)]
    gmm: Option<PathBuf>,
    #[arg(long)]
    fv_pca: Option<PathBuf>,
    #[arg(long)]
    mlp: Option<PathBuf>,
    /// Where to write the list of unreadable images as JSON.
    #[arg(long)]
    errors: Option<PathBuf>,
}

#[derive(Args)]
struct TrainPcaArgs {
    /// Fit the SIFT projection on descriptors sampled from this manifest.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    manifest: Option<PathBuf>,
    /// Fit on the rows of this feature set instead.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output dimension (`pca.dim`); defaults to 77 for SIFT.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGmmArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    local_pca: PathBuf,
    /// Number of Gaussians (`gmm.components`).
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainMlpArgs {
    #[arg(long)]
    features: PathBuf,
    /// Keep the epoch with the best accuracy on this set.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSvmArgs {
    #[arg(long)]
    features: PathBuf,
    /// Pick λ from the default grid by accuracy on this set.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Retrieval,
    Cluster,
    Ncm,
}

#[derive(Args)]
struct EvalArgs {
    task: EvalTask,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Line-delimited JSON report destination.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// JSON lines `{id, predicted}`; printed summary only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(path: &Option<PathBuf>) -> Result<Option<Arc<SavedModel>>> {
    Ok(path.as_deref().map(SavedModel::load).transpose()?.map(Arc::new))
}

fn configure_threads() -> Result<()> {
    let deterministic = match std::env::var("DOCREP_DETERMINISTIC") {
        Ok(v) => matches!(v.as_str(), "1" | "true" | "yes"),
        Err(_) => false,
    };
    let threads = match std::env::var("DOCREP_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Usage(format!("DOCREP_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let threads = if deterministic { Some(1) } else { threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Value> {
    configure_threads()?;
    let mut settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for o in &cli.overrides {
        settings.set_pair(o)?;
    }
    match cli.command {
        Command::SynthDocs(a) => {
            if let Some(v) = a.classes {
                settings.set("synth.classes", v);
            }
            if let Some(v) = a.per_class {
                settings.set("synth.per_class", v);
            }
            if let Some(v) = a.seed {
                settings.set("synth.seed", v);
            }
            settings.check_known()?;
            let cfg = settings.synth_config()?;
            let m = synth_docs(&a.out, &cfg)?;
            Ok(json!({
                "command": "synth-docs",
                "images": m.len(),
                "manifest": a.out.join(docrep::pipeline::synth::MANIFEST_NAME),
                "config": cfg,
            }))
        }
        Command::Extract(a) => {
            settings.check_known()?;
            let descriptor = Descriptor::parse(&a.descriptor)
                .ok_or_else(|| Error::Usage(format!("unknown descriptor {:?}", a.descriptor)))?;
            let models = ModelSet {
                local_pca: load_model(&a.local_pca)?,
                gmm: load_model(&a.gmm)?,
                fv_pca: load_model(&a.fv_pca)?,
                mlp: load_model(&a.mlp)?,
            };
            let manifest = load_manifest(&a.manifest)?;
            let encoder = Encoder::new(descriptor, &settings.extract_config()?, &models)?;
            let out = extract::extract(&manifest, &encoder)?;
            out.features.save(&a.out)?;
            if let Some(p) = &a.errors {
                write(p, serde_json::to_vec_pretty(&out.failures).expect("failures serialize"))?;
            }
            Ok(json!({
                "command": "extract",
                "descriptor": descriptor.name(),
                "rows": out.features.len(),
                "dim": out.features.dim(),
                "config_hash": encoder.config_hash(),
                "failures": out.failures,
                "out": a.out,
            }))
        }
        Command::TrainPca(a) => {
            if let Some(d) = a.dim {
                settings.set("pca.dim", d);
            }
            settings.check_known()?;
            let saved = match (&a.manifest, &a.features) {
                (Some(m), _) => {
                    let manifest = load_manifest(m)?;
                    let dim = settings.get_or("pca.dim", extract::default_local_dim())?;
                    let cfg = settings.extract_config()?;
                    train_local_pca(&manifest, &cfg.fv, &settings.sample_config()?, dim)?
                }
                (None, Some(f)) => {
                    let fs = FeatureSet::load(f)?;
                    let dim = settings
                        .get("pca.dim")?
                        .ok_or_else(|| Error::Usage("--dim is required with --features".into()))?;
                    train_feature_pca(&fs, dim)?
                }
                (None, None) => return Err(Error::Usage("give --manifest or --features".into())),
            };
            saved.save(&a.out)?;
            Ok(json!({ "command": "train-pca", "config_hash": saved.info.config_hash, "out": a.out }))
        }
        Command::TrainGmm(a) => {
            if let Some(c) = a.components {
                settings.set("gmm.components", c);
            }
            settings.check_known()?;
            let components = settings.get_or("gmm.components", 16usize)?;
            let manifest = load_manifest(&a.manifest)?;
            let pca = SavedModel::load(&a.local_pca)?;
            let cfg = settings.extract_config()?;
            let (saved, fit) = train_gmm(
                &manifest,
                &cfg.fv,
                &pca,
                components,
                &settings.em_config()?,
                &settings.sample_config()?,
            )?;
            saved.save(&a.out)?;
            Ok(json!({
                "command": "train-gmm",
                "components": components,
                "iterations": fit.log_likelihoods.len(),
                "converged": fit.converged,
                "final_avg_log_likelihood": fit.log_likelihoods.last(),
                "reseeded": fit.reseeded,
                "config_hash": saved.info.config_hash,
                "out": a.out,
            }))
        }
        Command::TrainMlp(a) => {
            settings.check_known()?;
            let fs = FeatureSet::load(&a.features)?;
            let val = a.validation.as_deref().map(FeatureSet::load).transpose()?;
            let (saved, outcome) = extract::train_mlp(&fs, &settings.mlp_config()?, val.as_ref())?;
            saved.save(&a.out)?;
            Ok(json!({
                "command": "train-mlp",
                "epochs": outcome.epoch_loss.len(),
                "final_loss": outcome.epoch_loss.last(),
                "selected_epoch": outcome.selected_epoch,
                "val_accuracy": outcome.val_accuracy.get(outcome.selected_epoch),
                "config_hash": saved.info.config_hash,
                "out": a.out,
            }))
        }
        Command::TrainSvm(a) => {
            settings.check_known()?;
            let fs = FeatureSet::load(&a.features)?;
            let cfg = settings.svm_config()?;
            let (saved, lambda, val_acc) = match &a.validation {
                None => (extract::train_svm(&fs, &cfg)?, cfg.lambda, None),
                Some(p) => {
                    let val = FeatureSet::load(p)?;
                    extract::check_same_features(&fs, &val)?;
                    let (labels, classes) = fs.class_indices()?;
                    let (vl, vnames) = val.class_indices()?;
                    let vl = vl
                        .iter()
                        .map(|&l| classes.binary_search(&vnames[l]).unwrap_or(usize::MAX))
                        .collect::<Vec<_>>();
                    let x = fs.to_matrix();
                    let vx = val.to_matrix();
                    let (best, acc) = select_svm_lambda((&x, &labels), (&vx, &vl), classes.len(), &LAMBDA_GRID, &cfg)?;
                    let chosen = docrep::predict::SvmConfig { lambda: best.lambda, ..cfg.clone() };
                    (extract::train_svm(&fs, &chosen)?, chosen.lambda, Some(acc))
                }
            };
            saved.save(&a.out)?;
            Ok(json!({
                "command": "train-svm",
                "lambda": lambda,
                "val_accuracy": val_acc,
                "config_hash": saved.info.config_hash,
                "out": a.out,
            }))
        }
        Command::Eval(a) => {
            if let Some(s) = a.seed {
                settings.set("eval.seed", s);
            }
            if let Some(r) = a.repeats {
                settings.set("eval.repeats", r);
            }
            settings.check_known()?;
            let seed = settings.get_or("eval.seed", 0u64)?;
            let repeats = settings.get_or("eval.repeats", docrep::evalsuite::DEFAULT_REPEATS)?;
            let fs = FeatureSet::load(&a.features)?;
            let (labels, _) = fs.class_indices()?;
            let task = match a.task {
                EvalTask::Retrieval => Task::Retrieval,
                EvalTask::Cluster => Task::Cluster,
                EvalTask::Ncm => Task::Ncm,
            };
            let report = run_protocol(&fs.to_matrix(), &labels, &[task], repeats, seed)?;
            if let Some(p) = &a.report {
                write(p, report.to_jsonl())?;
            }
            Ok(json!({
                "command": "eval",
                "task": task,
                "descriptor": fs.meta.descriptor,
                "config_hash": fs.meta.config_hash,
                "seed": seed,
                "splits": report.splits,
                "summary": report.summary,
            }))
        }
        Command::Predict(a) => {
            settings.check_known()?;
            let model = SavedModel::load(&a.model)?;
            let fs = FeatureSet::load(&a.features)?;
            let predicted = extract::predict(&model, &fs)?;
            let accuracy = fs.labels().map(|l| {
                l.iter().zip(&predicted).filter(|(a, b)| a == b).count() as f64 / l.len().max(1) as f64
            });
            if let Some(p) = &a.out {
                let lines: String = fs
                    .ids()
                    .iter()
                    .zip(&predicted)
                    .map(|(id, c)| json!({ "id": id, "predicted": c }).to_string() + "\n")
                    .collect();
                write(p, lines)?;
            }
            Ok(json!({
                "command": "predict",
                "model": model.model.kind().name(),
                "rows": predicted.len(),
                "accuracy": accuracy,
                "out": a.out,
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
