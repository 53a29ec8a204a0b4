//! Command-line driver: `pretrain`, `run` and `sweep`.
//!
//! Configuration is layered: built-in defaults, then an optional TOML file
//! (`--config`), then dotted overrides such as `--adapter.learning_rate 0.001`,
//! then the named shortcut flags. Exit codes: 0 success, 2 configuration
//! error, 1 runtime failure.

mod config;
mod experiment;

pub use config::{DataConfig, ExperimentConfig, ScheduleConfig, SweepConfig, WarmupConfig, WarmupSource, DEFAULT_DOMAIN_SHIFT};
pub use experiment::{
    load_split, obtain_model, run_single, run_sweep, warmup_data, CellFailure, CellSummary, MeanLosses, ModalityAccuracy, ResultTable,
    RunResult,
};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::adapt::{AdaptError, Method};
use crate::data::{pretrain_suite, DataError, PretrainConfig, PretrainReport};
use crate::losses::KlMode;
use crate::model::{save_checkpoint, ModelError, ParameterSelection};
use crate::stream::{write_trace_csv, StreamError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) | DataError::Config(_) | DataError::Parse { .. } | DataError::Empty => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::Schedule(_) | StreamError::TooLong { .. } => CliError::Config(e.to_string()),
            StreamError::Adapt(a) => a.into(),
            StreamError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "modality-tta", version, about = "Online test-time adaptation under missing modalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the multimodal model and the two single-modality references.
    Pretrain(CommonArgs),
    /// One protocol run: optional warm-up, then online evaluation.
    Run(CommonArgs),
    /// The full method x missing-rate x seed grid.
    Sweep(CommonArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KlArg {
    Av,
    PerModality,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ParamsArg {
    Norm,
    All,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// 1 - p_AV; restricts a sweep to this single rate.
    #[arg(long)]
    missing_rate: Option<f64>,
    /// none, midl, mi_only, dl_only, tent, shot or eta; restricts a sweep to this method.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Drop audio and video with equal probability.
    #[arg(long)]
    mixed: bool,
    #[arg(long, value_enum)]
    warmup: Option<WarmupSource>,
    #[arg(long, value_enum)]
    kl_mode: Option<KlArg>,
    #[arg(long, value_enum)]
    params: Option<ParamsArg>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretrained multimodal checkpoint for `run` and `sweep`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of the argument list.
type Overrides = Vec<(String, String)>;

fn split_dotted(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Config(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn build_config(args: &CommonArgs, overrides: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in overrides {
        cfg.apply_override(k, v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.missing_rate {
        cfg.schedule.missing_rate = r;
        cfg.sweep.missing_rates = vec![r];
    }
    if let Some(m) = args.method {
        cfg.adapter.method = m;
        cfg.sweep.methods = vec![m];
    }
    if args.mixed {
        cfg.schedule.mixed = true;
    }
    if let Some(w) = args.warmup {
        cfg.warmup.source = w;
    }
    if let Some(k) = args.kl_mode {
        cfg.adapter.kl_mode = match k {
            KlArg::Av => KlMode::AvOnly,
            KlArg::PerModality => KlMode::PerModality,
        };
    }
    if let Some(p) = args.params {
        cfg.adapter.params = match p {
            ParamsArg::Norm => ParameterSelection::NormLayersOnly,
            ParamsArg::All => ParameterSelection::AllParameters,
        };
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct TrainLog<'a> {
    config: &'a ExperimentConfig,
    reports: &'a [PretrainReport],
}

/// Writes `multimodal.ckpt`, `audio_only.ckpt`, `video_only.ckpt` and `train_log.json`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainReport>, CliError> {
    let split = load_split(cfg)?;
    let pc = PretrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    };
    let suite = pretrain_suite(&cfg.model, &split, &pc)?;
    fs::create_dir_all(&cfg.out)?;
    for (name, model) in [("multimodal", &suite.multimodal), ("audio_only", &suite.audio_only), ("video_only", &suite.video_only)] {
        save_checkpoint(model, cfg.out.join(format!("{name}.ckpt")))?;
    }
    write_json(
        &cfg.out.join("train_log.json"),
        &TrainLog {
            config: cfg,
            reports: &suite.reports,
        },
    )?;
    Ok(suite.reports)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    result: &'a RunResult,
}

/// Writes `summary.json` and `trace.csv`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunResult, CliError> {
    let split = load_split(cfg)?;
    let model = obtain_model(cfg, &split)?;
    let warm = warmup_data(cfg, &split)?;
    let (result, metrics) = run_single(cfg, &model, &split.val, warm.as_ref(), cfg.adapter.method, cfg.schedule.missing_rate, cfg.seed)?;
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("summary.json"), &RunSummary { config: cfg, result: &result })?;
    write_trace_csv(&metrics.records, fs::File::create(cfg.out.join("trace.csv"))?)?;
    Ok(result)
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    config: &'a ExperimentConfig,
    table: &'a ResultTable,
}

/// Writes `table.csv`, `curves.csv` and `summary.json`. Failed cells are
/// recorded and turn the result into a runtime error after all outputs exist.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<ResultTable, CliError> {
    let split = load_split(cfg)?;
    let model = obtain_model(cfg, &split)?;
    let warm = warmup_data(cfg, &split)?;
    let table = run_sweep(cfg, &model, &split.val, warm.as_ref());
    fs::create_dir_all(&cfg.out)?;
    table.write_table_csv(fs::File::create(cfg.out.join("table.csv"))?)?;
    table.write_curves_csv(fs::File::create(cfg.out.join("curves.csv"))?)?;
    write_json(&cfg.out.join("summary.json"), &SweepSummary { config: cfg, table: &table })?;
    if !table.failures.is_empty() {
        return Err(CliError::Runtime(format!("{} sweep cell(s) failed; see summary.json", table.failures.len())));
    }
    Ok(table)
}

fn dispatch(args: Vec<String>) -> Result<(), CliError> {
    let (rest, overrides) = split_dotted(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return Err(CliError::Config(e.to_string())),
        Err(e) => {
            print!("{e}");
            return Ok(());
        }
    };
    match cli.command {
        Command::Pretrain(a) => {
            let cfg = build_config(&a, &overrides)?;
            for r in cmd_pretrain(&cfg)? {
                println!("{:<3} train {:.4} val {:.4}", r.modality.tag(), r.train_accuracy, r.val_accuracy);
            }
            println!("checkpoints written to {}", cfg.out.display());
        }
        Command::Run(a) => {
            let cfg = build_config(&a, &overrides)?;
            let r = cmd_run(&cfg)?;
            println!(
                "{} missing_rate {} seed {}: accuracy {:.4} over {} samples ({} adapted) -> {}",
                r.method.name(),
                r.missing_rate,
                r.seed,
                r.accuracy,
                r.audio.total + r.video.total + r.audio_visual.total,
                r.adapted_steps,
                cfg.out.join("summary.json").display()
            );
        }
        Command::Sweep(a) => {
            let cfg = build_config(&a, &overrides)?;
            let table = cmd_sweep(&cfg)?;
            let mut buf = Vec::new();
            table.write_table_csv(&mut buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = args.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
