//! Command-line surface. Every flag can also come from a `JTAV_`-prefixed variable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::audio::{SpecKind, SpecParams};
use crate::checkpoint;
use crate::corpus::{
    generate_synthetic, load_dataset, load_manifest, preprocess, Dataset, LoadOptions, Requirement, Split,
    SynthTask, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::graph::{Graph, Mode};
use crate::image::{FeatureFile, ImageConfig, ImagePathway};
use crate::model::{Features, Model, Variant};
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::pipeline::{
    eval_retrieval, eval_sentiment, preset_config, ModelBundle, Preset, RetrievalTask, SentimentTask,
};
use crate::text::{load_embedding_file, TextPair};
use crate::train::{train, TrainConfig, TrainLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Tolerance reported by `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Input side of the desk-preset image network.
pub const DESK_IMAGE_SIZE: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "jtav", version, about = "Joint text, audio and image representations with cross-modal fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute spectrogram caches for every song of a manifest.
    Preprocess(PreprocessArgs),
    /// Train the sentiment head end to end.
    TrainSentiment(TrainArgs),
    /// Train the image-to-song matching scorer with fake-candidate sampling.
    TrainRetrieval(TrainArgs),
    /// Weighted AUC, F1 and precision on one split.
    EvalSentiment(EvalArgs),
    /// Med r and R@k against every song of the manifest.
    EvalRetrieval(EvalArgs),
    /// Print t, a, v and u for one record.
    Encode(EncodeArgs),
    /// Write a planted-signal synthetic corpus.
    Synth(SynthArgs),
    /// Finite-difference gradient checks at downscaled sizes.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Mels,
    Cqt,
}

impl From<KindArg> for SpecKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mels => SpecKind::MelS,
            KindArg::Cqt => SpecKind::Cqt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PathwayArg {
    /// Vectors from a `JVEC` feature file.
    Precomputed,
    /// Pixels through the small convolutional network.
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Sentiment,
    Retrieval,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long, env = "JTAV_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "JTAV_SPEC_KIND", value_enum, default_value = "mels")]
    pub spec_kind: KindArg,
    /// Directory for the caches and the rewritten manifest.
    #[arg(long, env = "JTAV_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, env = "JTAV_MANIFEST")]
    pub manifest: PathBuf,
    /// Feature file for the precomputed image pathway; defaults to features.jvec beside the manifest.
    #[arg(long, env = "JTAV_FEATURES")]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write; the model description goes to `<out>.json`.
    #[arg(long, env = "JTAV_OUT")]
    pub out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long, env = "JTAV_LOG")]
    pub log: Option<PathBuf>,
    #[arg(long, env = "JTAV_PRESET", default_value = "desk")]
    pub preset: Preset,
    #[arg(long, env = "JTAV_VARIANT", default_value = "jtav")]
    pub variant: Variant,
    #[arg(long, env = "JTAV_SPEC_KIND", value_enum, default_value = "mels")]
    pub spec_kind: KindArg,
    #[arg(long, env = "JTAV_IMAGE_PATHWAY", value_enum, default_value = "precomputed")]
    pub image_pathway: PathwayArg,
    /// Required for the precomputed pathway unless it can be read from the feature file.
    #[arg(long, env = "JTAV_FEATURE_DIM")]
    pub feature_dim: Option<usize>,
    /// Word vectors in text format (`word v1 v2 ...`).
    #[arg(long, env = "JTAV_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    #[arg(long, env = "JTAV_EPOCHS", default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, env = "JTAV_BATCH", default_value_t = 64)]
    pub batch: usize,
    #[arg(long, env = "JTAV_PATIENCE", default_value_t = 3)]
    pub patience: usize,
    /// Defaults to 1e-2 for the desk preset and 1e-3 for the full one.
    #[arg(long, env = "JTAV_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "JTAV_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = "JTAV_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "JTAV_SPLIT", value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Cut-offs for R@k.
    #[arg(long, env = "JTAV_K", value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = "JTAV_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Record id in the manifest.
    #[arg(long, env = "JTAV_ID")]
    pub id: String,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, env = "JTAV_TASK", value_enum, default_value = "sentiment")]
    pub task: TaskArg,
    #[arg(long, env = "JTAV_COUNT", default_value_t = 600)]
    pub count: usize,
    #[arg(long, env = "JTAV_VOCAB_SIZE", default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, env = "JTAV_SIGNAL", default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, env = "JTAV_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "JTAV_SONGS", default_value_t = 50)]
    pub songs: usize,
    #[arg(long, env = "JTAV_CLIP_SECONDS", default_value_t = 10)]
    pub clip_seconds: usize,
    #[arg(long, env = "JTAV_IMAGE_SIZE", default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, env = "JTAV_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, env = "JTAV_SEEDS", default_value_t = 5)]
    pub seeds: u64,
}

/// Maps an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } | Error::ShapeContract(_) => "shape",
        Error::Domain { .. } => "domain",
        Error::EmptyInput(_) => "empty-input",
        Error::Contract(_) => "contract",
        Error::UninitializedStats(_) => "uninitialized-statistics",
        Error::Format { .. } => "format",
        Error::Sampling(_) => "sampling",
        Error::AucUndefined(_) => "auc-undefined",
        Error::Manifest { .. } => "manifest",
        Error::EmptyManifest(_) => "empty-manifest",
        Error::Divergence { .. } => "divergence",
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

pub fn error_json(e: &Error) -> String {
    let mut v = json!({
        "error": error_kind(e),
        "message": e.to_string(),
        "exit_code": exit_code(e),
    });
    match e {
        Error::Manifest { line, path, .. } => {
            v["line"] = json!(line);
            v["path"] = json!(path.display().to_string());
        }
        Error::Divergence { epoch, step, .. } => {
            v["epoch"] = json!(epoch);
            v["step"] = json!(step);
        }
        Error::Io { path, .. } => v["path"] = json!(path.display().to_string()),
        _ => {}
    }
    v.to_string()
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
/// Reports go to `out`, error objects to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let msg = json!({"error": "usage", "message": e.to_string().trim_end(), "exit_code": EXIT_VALIDATION});
            let _ = writeln!(err, "{msg}");
            return EXIT_VALIDATION;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}", error_json(&e));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Preprocess(a) => cmd_preprocess(a, out),
        Command::TrainSentiment(a) => cmd_train(a, TaskArg::Sentiment, out),
        Command::TrainRetrieval(a) => cmd_train(a, TaskArg::Retrieval, out),
        Command::EvalSentiment(a) => cmd_eval(a, TaskArg::Sentiment, out),
        Command::EvalRetrieval(a) => cmd_eval(a, TaskArg::Retrieval, out),
        Command::Encode(a) => cmd_encode(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_preprocess(a: PreprocessArgs, out: &mut dyn Write) -> Result<i32> {
    let m = load_manifest(&a.manifest, Requirement::Any)?;
    let kind = SpecKind::from(a.spec_kind);
    let cached = preprocess(&m, kind, &SpecParams::default(), &a.out)?;
    let path = a.out.join("manifest.jsonl");
    cached.write(&path)?;
    let [train, val, test] = cached.split_counts();
    emit(
        out,
        &json!({
            "manifest": path.display().to_string(),
            "records": cached.records.len(),
            "spec_kind": kind.name(),
            "splits": {"train": train, "val": val, "test": test},
        })
        .to_string(),
    )?;
    Ok(EXIT_OK)
}

fn default_features(data: &DataArgs) -> PathBuf {
    data.features.clone().unwrap_or_else(|| {
        data.manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .join("features.jvec")
    })
}

fn pathway(a: &TrainArgs) -> Result<ImagePathway> {
    Ok(match (a.image_pathway, a.preset) {
        (PathwayArg::Cnn, Preset::Full) => ImageConfig::default().pathway,
        (PathwayArg::Cnn, Preset::Desk) => ImagePathway::Cnn {
            size: DESK_IMAGE_SIZE,
            channels: vec![4, 8, 8],
            pools: vec![2, 2, 2],
        },
        (PathwayArg::Precomputed, _) => {
            let feature_dim = match a.feature_dim {
                Some(d) => d,
                None => FeatureFile::load(&default_features(&a.data))?.dim,
            };
            ImagePathway::Precomputed { feature_dim }
        }
    })
}

fn load_options(data: &DataArgs, kind: SpecKind, image: ImagePathway) -> LoadOptions {
    LoadOptions {
        spec_kind: kind,
        spec_params: SpecParams::default(),
        image,
        features: data.features.clone(),
    }
}

fn requirement(task: TaskArg) -> Requirement {
    match task {
        TaskArg::Sentiment => Requirement::Labels,
        TaskArg::Retrieval => Requirement::Any,
    }
}

fn cmd_train(a: TrainArgs, task: TaskArg, out: &mut dyn Write) -> Result<i32> {
    let m = load_manifest(&a.data.manifest, requirement(task))?;
    let kind = SpecKind::from(a.spec_kind);
    let image = pathway(&a)?;
    let data = load_dataset(&m, &load_options(&a.data, kind, image.clone()), None)?;
    let config = preset_config(a.preset, a.variant, image);
    let pretrained = match &a.embeddings {
        Some(p) => Some(load_embedding_file(p, config.text.embed_dim)?),
        None => None,
    };
    let bundle = ModelBundle {
        config,
        spec_kind: kind,
        vocab: data.vocab.clone(),
    };
    let (mut store, model) = bundle.build(a.seed, pretrained.as_ref())?;
    let lr = a.lr.unwrap_or(match a.preset {
        Preset::Desk => 1e-2,
        Preset::Full => AdamConfig::default().lr,
    });
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
        patience: a.patience,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    };
    let log = match task {
        TaskArg::Sentiment => train(&mut store, &SentimentTask::new(&model, &data)?, &cfg)?,
        TaskArg::Retrieval => train(&mut store, &RetrievalTask::new(&model, &data)?, &cfg)?,
    };
    checkpoint::save(&store, &a.out)?;
    bundle.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    log.write(&log_path)?;
    emit(out, &train_summary(&a.out, &log))?;
    Ok(EXIT_OK)
}

fn train_summary(ckpt: &Path, log: &TrainLog) -> String {
    json!({
        "checkpoint": ckpt.display().to_string(),
        "epochs": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "best_val_loss": log.best_val_loss,
        "stopped_early": log.stopped_early,
    })
    .to_string()
}

/// Rebuilds a trained model and loads the evaluation data with its vocabulary.
fn restore(checkpoint_path: &Path, data: &DataArgs, req: Requirement) -> Result<(ParamStore, Model, Dataset)> {
    let bundle = ModelBundle::load(checkpoint_path)?;
    let m = load_manifest(&data.manifest, req)?;
    let opts = load_options(data, bundle.spec_kind, bundle.config.image.pathway.clone());
    let dataset = load_dataset(&m, &opts, Some(bundle.vocab.clone()))?;
    let (mut store, model) = bundle.build(0, None)?;
    checkpoint::load_into(&mut store, checkpoint_path)?;
    Ok((store, model, dataset))
}

fn cmd_eval(a: EvalArgs, task: TaskArg, out: &mut dyn Write) -> Result<i32> {
    let (store, model, data) = restore(&a.checkpoint, &a.data, requirement(task))?;
    let split = Split::from(a.split);
    let report = match task {
        TaskArg::Sentiment => eval_sentiment(&model, &store, &data, split)?,
        TaskArg::Retrieval => eval_retrieval(&model, &store, &data, split, &a.k)?,
    };
    emit(out, &report.to_json_line())?;
    Ok(EXIT_OK)
}

fn cmd_encode(a: EncodeArgs, out: &mut dyn Write) -> Result<i32> {
    let (store, model, data) = restore(&a.checkpoint, &a.data, Requirement::Any)?;
    let q = data
        .items
        .iter()
        .position(|it| it.id == a.id)
        .ok_or_else(|| Error::Config(format!("no record with id '{}'", a.id)))?;
    let item = &data.items[q];
    let song = &data.songs[item.song];
    let cfg = &model.config.text;
    let pair = TextPair::from_parts(&song.lyrics, item.caption.as_deref(), cfg.max_words, cfg.max_support)?;
    let mut g = Graph::new(&store, Mode::Eval);
    let f: Features = model.encode(&mut g, &pair, &song.spec, &item.image)?;
    let scored = model.score(&mut g, f)?;
    let vec = |v: Option<crate::graph::Var>, g: &Graph<'_>| {
        v.map(|v| {
            let d = g.value(v).data();
            json!({"dim": d.len(), "values": d})
        })
    };
    let u = scored.fused.as_ref().map(|u| u.u);
    let report = json!({
        "id": item.id,
        "variant": model.config.variant.name(),
        "t": vec(f.t, &g),
        "a": vec(f.a, &g),
        "v": vec(f.v, &g),
        "u": vec(u, &g),
        "score": g.value(scored.prob).data()[0],
    });
    emit(out, &report.to_string())?;
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SyntheticSpec {
        task: match a.task {
            TaskArg::Sentiment => SynthTask::Sentiment,
            TaskArg::Retrieval => SynthTask::Retrieval,
        },
        count: a.count,
        vocab_size: a.vocab_size,
        signal: a.signal,
        seed: a.seed,
        songs: a.songs,
        clip_seconds: a.clip_seconds,
        image_size: a.image_size,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let m = generate_synthetic(&spec, &a.out)?;
    let [train, val, test] = m.split_counts();
    emit(
        out,
        &json!({
            "manifest": a.out.join("manifest.jsonl").display().to_string(),
            "records": m.records.len(),
            "splits": {"train": train, "val": val, "test": test},
        })
        .to_string(),
    )?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let entries = gradcheck::suite(&seeds)?;
    let mut worst = gradcheck::GradCheckReport::default();
    for e in &entries {
        emit(
            out,
            &json!({
                "check": e.name,
                "seed": e.seed,
                "checked": e.report.checked,
                "max_rel_err": e.report.max_rel_err,
                "worst": e.report.worst,
            })
            .to_string(),
        )?;
        let mut r = e.report.clone();
        r.worst = format!("{}: {}", e.name, r.worst);
        worst.merge(r);
    }
    let pass = worst.passes(GRADCHECK_TOL);
    emit(
        out,
        &json!({
            "checks": entries.len(),
            "checked": worst.checked,
            "max_rel_err": worst.max_rel_err,
            "worst": worst.worst,
            "tolerance": GRADCHECK_TOL,
            "pass": pass,
        })
        .to_string(),
    )?;
    Ok(if pass { EXIT_OK } else { EXIT_VALIDATION })
}
