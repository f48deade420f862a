//! `cagan`: synthesize scenes, train on task streams, detect and report.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use cagan_core::detect_eval::{cl_metrics, evaluate, score_map, ClMetrics};
use cagan_core::error::Error;
use cagan_core::hsi_data::{generate_task_stream, load_hsi, load_mask, save_hsi, save_mask, SceneSpec};
use cagan_core::preprocess::ss_features;
use cagan_core::replay::ReplayBuffer;
use cagan_core::train::{
    prepare_stream, train_prepared, unify_cube, AblationMode, NetworkParams, ResumeState, StreamTask,
    TaskStream,
};

use config::{resolve, RunFile, TaskEntry};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                Error::NonFiniteIntermediate(_) | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 4,
                Error::InvalidArgument(_) | Error::EvenWindow(_) | Error::Unsupported(_) => 2,
                _ => 3,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "cagan", version, about = "Capsule-GAN hyperspectral anomaly detection with continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes (HSIB cube + MSK1 truth) and a run file listing them.
    Synth(SynthArgs),
    /// Train on one scene or a stream of scenes.
    Train(TrainArgs),
    /// Score a scene with a trained checkpoint.
    Detect(DetectArgs),
    /// Continual-learning metrics from an AUC matrix.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Scene size as HEIGHTxWIDTHxBANDS.
    #[arg(long, default_value = "64x64x32")]
    size: String,
    #[arg(long, default_value_t = 5)]
    anomalies: usize,
    #[arg(long, default_value_t = 0.3)]
    contrast: f64,
    /// Largest anomaly blob radius in pixels (1 to 3).
    #[arg(long, default_value_t = 3)]
    max_radius: usize,
    /// Number of scenes with mutually distinct backgrounds.
    #[arg(long, default_value_t = 1)]
    tasks: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run file: `out`, `threads`, `[[tasks]]` and a `[train]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene as `[name=]cube.hsib[,truth.msk]`; repeat for a stream. Replaces the file's tasks.
    #[arg(long = "task")]
    tasks: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Checkpoint to continue from; its stage count selects the next task.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Replay buffer saved alongside the resumed checkpoint.
    #[arg(long, requires = "resume")]
    resume_buffer: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_generator: Option<f64>,
    #[arg(long)]
    lr_discriminator: Option<f64>,
    #[arg(long)]
    csd_weight: Option<f64>,
    #[arg(long)]
    replay_mix_ratio: Option<f64>,
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long)]
    cbm_beta: Option<f64>,
    /// Treat every pixel as background.
    #[arg(long)]
    no_cbm: bool,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    exemplars_per_task: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    n_thresholds: Option<usize>,
}

impl TrainArgs {
    fn flag_overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("mode", self.mode.clone().map(Value::from));
        put("epochs", self.epochs.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("lr_generator", self.lr_generator.map(Value::from));
        put("lr_discriminator", self.lr_discriminator.map(Value::from));
        put("csd_weight", self.csd_weight.map(Value::from));
        put("replay_mix_ratio", self.replay_mix_ratio.map(Value::from));
        put("pca_dim", self.pca_dim.map(Value::from));
        put("cbm_beta", self.cbm_beta.map(Value::from));
        put("use_cbm", self.no_cbm.then_some(Value::from(false)));
        put("window", self.window.map(Value::from));
        put("exemplars_per_task", self.exemplars_per_task.map(Value::from));
        put("clusters", self.clusters.map(Value::from));
        put("n_thresholds", self.n_thresholds.map(Value::from));
        m
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = cagan_core::detect_eval::DEFAULT_THRESHOLDS)]
    n_thresholds: usize,
    /// Keep the ROC samples in the report.
    #[arg(long)]
    roc: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON AUC matrix: a bare array of rows or an object with `auc_matrix`.
    #[arg(long)]
    matrix: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn parse_size(s: &str) -> CliResult<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("size {s:?} is not HEIGHTxWIDTHxBANDS")))?;
    match dims[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(CliError::Usage(format!("size {s:?} is not HEIGHTxWIDTHxBANDS"))),
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let (h, w, c) = parse_size(&a.size)?;
    if a.tasks == 0 {
        return Err(CliError::Usage("at least one task is required".into()));
    }
    let spec = SceneSpec {
        max_radius: a.max_radius,
        ..SceneSpec::new(h, w, c, a.anomalies, a.contrast)
    };
    let scenes = if a.tasks == 1 {
        vec![spec.generate(a.seed)?]
    } else {
        generate_task_stream(a.seed, a.tasks, &spec)?
    };
    create_dir(&a.out)?;
    let mut entries = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let stem = if a.tasks == 1 { "scene".to_string() } else { format!("task{i}") };
        save_hsi(&s.cube, a.out.join(format!("{stem}.hsib")))?;
        save_mask(&s.truth, a.out.join(format!("{stem}.msk")))?;
        entries.push(TaskEntry {
            name: stem.clone(),
            cube: format!("{stem}.hsib").into(),
            truth: Some(format!("{stem}.msk").into()),
        });
    }
    let run = RunFile {
        tasks: entries,
        ..RunFile::default()
    };
    let text = toml::to_string(&run).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(a.out.join("tasks.toml"), text).map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote {} scene(s) to {}", scenes.len(), a.out.display());
    Ok(())
}

fn load_stream(entries: &[TaskEntry]) -> CliResult<TaskStream> {
    let mut tasks = Vec::with_capacity(entries.len());
    for e in entries {
        let cube = load_hsi(&e.cube)?;
        let truth = e.truth.as_ref().map(load_mask).transpose()?;
        tasks.push(StreamTask {
            name: e.name.clone(),
            cube,
            truth,
        });
    }
    Ok(TaskStream::new(tasks)?)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let file = a.config.as_deref().map(RunFile::load).transpose()?;
    let flags = a.flag_overrides();
    if let Some(Value::String(m)) = flags.get("mode") {
        serde_json::from_value::<AblationMode>(Value::String(m.clone()))
            .map_err(|_| CliError::Usage(format!("unknown mode {m:?}")))?;
    }
    let cfg = resolve(file.as_ref().map(|f| &f.train), flags)?;
    let config = &cfg.resolved;
    let entries: Vec<TaskEntry> = if a.tasks.is_empty() {
        file.as_ref().map(|f| f.tasks.clone()).unwrap_or_default()
    } else {
        a.tasks.iter().map(|t| TaskEntry::parse(t)).collect::<CliResult<_>>()?
    };
    if entries.is_empty() {
        return Err(CliError::Usage("no tasks given: pass --task or a config with [[tasks]]".into()));
    }
    let out = a
        .out
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.out.clone()))
        .ok_or_else(|| CliError::Usage("no output directory: pass --out".into()))?;
    let threads = a.threads.or(file.as_ref().and_then(|f| f.threads)).unwrap_or(1).max(1);

    let stream = load_stream(&entries)?;
    let channels = stream.unified_channels(config.pca_dim);
    let prepared = prepare_stream(&stream, config)?;
    let resume = match &a.resume {
        Some(path) => {
            let params = NetworkParams::load(path)?;
            let buffer = match &a.resume_buffer {
                Some(b) => ReplayBuffer::load(b)?,
                None => ReplayBuffer::new(config.exemplars_per_task, 2 * channels),
            };
            if params.task_stage as usize >= prepared.len() {
                return Err(CliError::Usage(format!(
                    "checkpoint has completed {} stage(s); the stream has only {}",
                    params.task_stage,
                    prepared.len()
                )));
            }
            Some(ResumeState { params, buffer })
        }
        None => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| train_prepared(&prepared, channels, config, resume))?;

    create_dir(&out)?;
    let mut stages = Vec::new();
    for s in &outcome.stages {
        let ckpt = format!("stage_{}.caps", s.stage);
        s.params.save(out.join(&ckpt))?;
        stages.push(json!({
            "stage": s.stage,
            "task": s.name,
            "checkpoint": ckpt,
            "buffer_entries": s.buffer_len,
            "auc_row": s.auc_row,
            "log": s.log,
        }));
    }
    let last = outcome.stages.last().expect("at least one stage ran").stage;
    let buffer_file = if config.mode.keeps_buffer() {
        let name = format!("buffer_{last}.rply");
        outcome.buffer.save(out.join(&name))?;
        Some(name)
    } else {
        None
    };
    let matrix = if a.resume.is_none() { outcome.auc_matrix() } else { None };
    let metrics: Option<ClMetrics> = matrix.as_deref().map(cl_metrics).transpose()?;
    if let Some(m) = &matrix {
        write_json(&out.join("auc_matrix.json"), &json!({ "auc_matrix": m }))?;
    }
    let tasks: Vec<Value> = prepared
        .iter()
        .zip(&entries)
        .map(|(p, e)| {
            json!({
                "name": p.name,
                "cube": e.cube,
                "truth": e.truth,
                "source_channels": p.source_channels,
                "background_rows": p.background.len(),
                "cbm_flagged": p.cbm.flagged(),
            })
        })
        .collect();
    let manifest = json!({
        "command": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads,
        "seed": config.seed,
        "config": cfg,
        "preprocess": {
            "unified_channels": channels,
            "feature_dim": 2 * channels,
            "order": "pca_then_minmax",
        },
        "resumed_from": a.resume,
        "tasks": tasks,
        "stages": stages,
        "buffer_file": buffer_file,
        "auc_matrix": matrix,
        "metrics": metrics,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("trained {} stage(s); outputs in {}", outcome.stages.len(), out.display());
    if let Some(m) = metrics {
        match m.bwt {
            Some(b) => println!("ACC {:.4}  BWT {:+.4}", m.acc, b),
            None => println!("ACC {:.4}", m.acc),
        }
    }
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> CliResult<()> {
    let params = NetworkParams::load(&a.checkpoint)?;
    let cube = load_hsi(&a.cube)?;
    if cube.channels() < params.channels {
        return Err(CliError::Core(Error::DimensionMismatch {
            expected: params.channels,
            found: cube.channels(),
        }));
    }
    let truth = a.truth.as_ref().map(load_mask).transpose()?;
    if let Some(t) = &truth {
        if !t.matches(&cube) {
            return Err(CliError::Data(format!(
                "truth {}x{} does not cover cube {}x{}",
                t.height(),
                t.width(),
                cube.height(),
                cube.width()
            )));
        }
    }
    let unified = unify_cube(&cube, params.channels)?;
    let features = ss_features(&unified, params.window)?;
    let scores = score_map(&params.generator, &features)?;
    let report = truth.as_ref().map(|t| evaluate(&scores, t, a.n_thresholds)).transpose()?;

    create_dir(&a.out)?;
    scores.save_text(a.out.join("scores.txt"))?;
    scores.save_binary(a.out.join("scores.smap"))?;
    if let Some(mut r) = report {
        if !a.roc {
            r.roc_points.clear();
        }
        write_json(&a.out.join("report.json"), &r)?;
        println!("AUC(D,F) {:.4}  AUC(D,tau) {:.4}  AUC(F,tau) {:.4}", r.auc_df, r.auc_dtau, r.auc_ftau);
    }
    println!("scores written to {}", a.out.display());
    Ok(())
}

fn parse_matrix(v: &Value) -> CliResult<Vec<Vec<f64>>> {
    let rows = v
        .get("auc_matrix")
        .unwrap_or(v)
        .as_array()
        .ok_or_else(|| CliError::Data("AUC matrix must be an array of rows".into()))?;
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let cells = row
            .as_array()
            .ok_or_else(|| CliError::Data(format!("AUC matrix row {r} is not an array")))?;
        let mut vals = Vec::with_capacity(r + 1);
        for (i, c) in cells.iter().enumerate() {
            match (c.as_f64(), i <= r) {
                (Some(x), true) => vals.push(x),
                (None, false) if c.is_null() => {}
                _ => return Err(CliError::Data(format!("AUC matrix entry ({r}, {i}) is invalid"))),
            }
        }
        out.push(vals);
    }
    Ok(out)
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.matrix)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", a.matrix.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.matrix.display())))?;
    let metrics = cl_metrics(&parse_matrix(&v)?)?;
    match &a.out {
        Some(p) => write_json(p, &metrics)?,
        None => println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize")),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
