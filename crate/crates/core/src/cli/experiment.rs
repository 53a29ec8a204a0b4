use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, WarmupSource};
use super::CliError;
use crate::adapt::{Adapter, AdapterConfig, ComputeCounters, Method};
use crate::data::{generate_shifted, generate_synthetic, load_features, pretrain, Dataset, DatasetSplit};
use crate::model::{load_checkpoint, Modality, MultimodalClassifier};
use crate::stream::{run_protocol, OnlineMetrics, Phase, StreamSchedule};

/// Train/val split for the configured data source.
pub fn load_split(cfg: &ExperimentConfig) -> Result<DatasetSplit, CliError> {
    let split = match &cfg.data.features {
        Some(path) => load_features(path)?.split(cfg.seed),
        None => generate_synthetic(&cfg.data.synthetic, cfg.seed)?,
    };
    split.train.check_compatible(&cfg.model)?;
    Ok(split)
}

/// Warm-up samples for the configured source, if any.
pub fn warmup_data(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<Option<Dataset>, CliError> {
    match cfg.warmup.source {
        WarmupSource::None => Ok(None),
        WarmupSource::Lta => Ok(Some(split.train.clone())),
        WarmupSource::Shifted => {
            if cfg.data.features.is_some() {
                return Err(CliError::Config("shifted warm-up needs the synthetic data source".into()));
            }
            let resolved = cfg.resolved();
            Ok(Some(generate_shifted(&resolved.data.synthetic, cfg.seed)?.train))
        }
    }
}

/// Loads the configured checkpoint, or pretrains the multimodal model.
pub fn obtain_model(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<MultimodalClassifier, CliError> {
    let model = match &cfg.checkpoint {
        Some(path) => load_checkpoint(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => {
            let pc = crate::data::PretrainConfig {
                seed: cfg.seed,
                ..cfg.pretrain.clone()
            };
            pretrain(&cfg.model, &split.train, &split.val, &pc, Modality::AudioVisual)?.0
        }
    };
    split.val.check_compatible(model.config())?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanLosses {
    pub l_ent: f64,
    pub l_div: f64,
    pub l_mi: f64,
    pub l_kl: f64,
}

/// Outcome of one (method, missing rate, seed) protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub missing_rate: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub audio: ModalityAccuracy,
    pub video: ModalityAccuracy,
    pub audio_visual: ModalityAccuracy,
    /// Means over adapted evaluation steps.
    pub mean_losses: MeanLosses,
    pub adapted_steps: usize,
    /// Samples per adaptation step after method defaults.
    pub batch_size: usize,
    pub warmup_revealed: usize,
    pub warmup_adapted_steps: usize,
    pub compute: ComputeCounters,
}

impl RunResult {
    fn new(adapter: &Adapter, rate: f64, seed: u64, metrics: &OnlineMetrics, warm: Option<&OnlineMetrics>) -> Self {
        let per = |m: Modality| {
            let t = metrics.modality(m);
            ModalityAccuracy {
                correct: t.correct,
                total: t.total,
                accuracy: t.accuracy(),
            }
        };
        let [l_ent, l_div, l_mi, l_kl] = metrics.mean_losses();
        Self {
            method: adapter.config().method,
            missing_rate: rate,
            seed,
            accuracy: metrics.accuracy(),
            audio: per(Modality::Audio),
            video: per(Modality::Video),
            audio_visual: per(Modality::AudioVisual),
            mean_losses: MeanLosses { l_ent, l_div, l_mi, l_kl },
            adapted_steps: metrics.adapted_steps,
            batch_size: adapter.config().effective_batch_size(),
            warmup_revealed: warm.map_or(0, |w| w.revealed),
            warmup_adapted_steps: warm.map_or(0, |w| w.adapted_steps),
            compute: adapter.count_compute(),
        }
    }
}

/// Optional warm-up followed by evaluation on the validation split.
pub fn run_single(
    cfg: &ExperimentConfig,
    model: &MultimodalClassifier,
    val: &Dataset,
    warm: Option<&Dataset>,
    method: Method,
    missing_rate: f64,
    seed: u64,
) -> Result<(RunResult, OnlineMetrics), CliError> {
    let mut adapter = Adapter::new(
        model.clone(),
        AdapterConfig {
            method,
            ..cfg.adapter.clone()
        },
    )?;
    let warm_metrics = match warm {
        Some(data) => {
            let length = cfg.warmup.length.unwrap_or(data.len());
            let schedule = if cfg.warmup.complete_only {
                StreamSchedule::complete(seed, length)
            } else {
                StreamSchedule::from_missing_rate(missing_rate, cfg.schedule.mixed, seed, length)?
            };
            Some(run_protocol(&mut adapter, &schedule, data, Phase::Warmup)?)
        }
        None => None,
    };
    let length = cfg.schedule.length.unwrap_or(val.len());
    let schedule = StreamSchedule::from_missing_rate(missing_rate, cfg.schedule.mixed, seed, length)?;
    let metrics = run_protocol(&mut adapter, &schedule, val, Phase::Evaluate)?;
    let result = RunResult::new(&adapter, missing_rate, seed, &metrics, warm_metrics.as_ref());
    Ok((result, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub missing_rate: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds; 0 for a single run.
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub missing_rate: f64,
    pub seed: u64,
    pub error: String,
}

/// Per-run rows plus mean and std over seeds for each (method, rate) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
}

impl ResultTable {
    pub fn new(rows: Vec<RunResult>, failures: Vec<CellFailure>, methods: &[Method], rates: &[f64]) -> Self {
        let mut cells = Vec::new();
        for &method in methods {
            for &rate in rates {
                let acc: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == method && r.missing_rate == rate)
                    .map(|r| r.accuracy)
                    .collect();
                if acc.is_empty() {
                    continue;
                }
                let n = acc.len() as f64;
                let mean = acc.iter().sum::<f64>() / n;
                let std = if acc.len() > 1 {
                    (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                cells.push(CellSummary {
                    method,
                    missing_rate: rate,
                    runs: acc.len(),
                    mean_accuracy: mean,
                    std_accuracy: std,
                });
            }
        }
        Self { rows, cells, failures }
    }

    pub fn cell(&self, method: Method, missing_rate: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method && c.missing_rate == missing_rate)
    }

    /// Wide table: one row per method, one `mean ± std` column (in percent)
    /// per missing rate.
    pub fn write_table_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut rates: Vec<f64> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !rates.contains(&c.missing_rate) {
                rates.push(c.missing_rate);
            }
            if !methods.contains(&c.method) {
                methods.push(c.method);
            }
        }
        write!(out, "method")?;
        for r in &rates {
            write!(out, ",missing_{r}")?;
        }
        writeln!(out)?;
        for m in methods {
            write!(out, "{}", m.name())?;
            for &r in &rates {
                match self.cell(m, r) {
                    Some(c) => write!(out, ",{:.2} ± {:.2}", 100.0 * c.mean_accuracy, 100.0 * c.std_accuracy)?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Long format, one line per run, for plotting accuracy against missing rate.
    pub fn write_curves_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "method,missing_rate,seed,accuracy,accuracy_a,accuracy_v,accuracy_av,adapted_steps,forwards_live,forwards_frozen,backwards"
        )?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method.name(),
                r.missing_rate,
                r.seed,
                r.accuracy,
                opt(r.audio.accuracy),
                opt(r.video.accuracy),
                opt(r.audio_visual.accuracy),
                r.adapted_steps,
                r.compute.forwards_live,
                r.compute.forwards_frozen,
                r.compute.backwards
            )?;
        }
        Ok(())
    }
}

/// Runs every (method, missing rate, seed) cell in parallel.
pub fn run_sweep(cfg: &ExperimentConfig, model: &MultimodalClassifier, val: &Dataset, warm: Option<&Dataset>) -> ResultTable {
    let cells: Vec<(Method, f64, u64)> = cfg
        .sweep
        .methods
        .iter()
        .flat_map(|&m| cfg.sweep.missing_rates.iter().flat_map(move |&r| cfg.sweep.seeds.iter().map(move |&s| (m, r, s))))
        .collect();
    let outcomes: Vec<Result<RunResult, CellFailure>> = cells
        .par_iter()
        .map(|&(method, rate, seed)| {
            run_single(cfg, model, val, warm, method, rate, seed)
                .map(|(r, _)| r)
                .map_err(|e| CellFailure {
                    method,
                    missing_rate: rate,
                    seed,
                    error: e.to_string(),
                })
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => rows.push(r),
            Err(f) => failures.push(f),
        }
    }
    ResultTable::new(rows, failures, &cfg.sweep.methods, &cfg.sweep.missing_rates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, rate: f64, seed: u64, accuracy: f64) -> RunResult {
        let empty = ModalityAccuracy {
            correct: 0,
            total: 0,
            accuracy: None,
        };
        RunResult {
            method,
            missing_rate: rate,
            seed,
            accuracy,
            audio: empty.clone(),
            video: empty.clone(),
            audio_visual: empty,
            mean_losses: MeanLosses {
                l_ent: 0.0,
                l_div: 0.0,
                l_mi: 0.0,
                l_kl: 0.0,
            },
            adapted_steps: 0,
            batch_size: 1,
            warmup_revealed: 0,
            warmup_adapted_steps: 0,
            compute: ComputeCounters::default(),
        }
    }

    #[test]
    fn aggregates_mean_and_sample_std() {
        let rows = vec![
            row(Method::None, 0.5, 0, 0.5),
            row(Method::None, 0.5, 1, 0.7),
            row(Method::Midl, 0.5, 0, 0.9),
        ];
        let t = ResultTable::new(rows, vec![], &[Method::None, Method::Midl], &[0.5, 1.0]);
        assert_eq!(t.cells.len(), 2);
        let c = t.cell(Method::None, 0.5).unwrap();
        approx::assert_abs_diff_eq!(c.mean_accuracy, 0.6, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(c.std_accuracy, 0.2f64.hypot(0.0) / 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(t.cell(Method::Midl, 0.5).unwrap().std_accuracy, 0.0);

        let mut buf = Vec::new();
        t.write_table_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,missing_0.5");
        assert!(text.contains("none,60.00 ± 14.14"), "{text}");
        let mut buf = Vec::new();
        t.write_curves_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
