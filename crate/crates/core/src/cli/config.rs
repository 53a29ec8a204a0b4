use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::adapt::{AdapterConfig, Method};
use crate::data::{DomainShift, PretrainConfig, SyntheticSpec};
use crate::model::ModelConfig;

/// Where evaluation and warm-up samples come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Precomputed feature file; the synthetic generator is used when unset.
    pub features: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// `1 - p_AV`.
    pub missing_rate: f64,
    /// Split the missing mass evenly between audio and video instead of
    /// dropping video only.
    pub mixed: bool,
    /// Stream length; the whole evaluation split when unset.
    pub length: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            missing_rate: 0.5,
            mixed: false,
            length: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WarmupSource {
    #[default]
    None,
    /// Unlabeled in-domain training split.
    Lta,
    /// Unlabeled covariate-shifted data.
    Shifted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub source: WarmupSource,
    /// Samples revealed during warm-up; the whole warm-up split when unset.
    pub length: Option<usize>,
    /// Reveal only modality-complete samples; otherwise follow the run schedule.
    pub complete_only: bool,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            source: WarmupSource::None,
            length: None,
            complete_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub missing_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            missing_rates: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
        }
    }
}

/// Everything a `pretrain`, `run` or `sweep` invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives data generation, the train/val split, pretraining and the
    /// stream of a single run.
    pub seed: u64,
    pub out: PathBuf,
    /// Pretrained multimodal checkpoint; `run` and `sweep` pretrain in
    /// memory when unset.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub schedule: ScheduleConfig,
    pub warmup: WarmupConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            schedule: ScheduleConfig::default(),
            warmup: WarmupConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Shift used for `--warmup shifted` when the data section names none.
pub const DEFAULT_DOMAIN_SHIFT: DomainShift = DomainShift {
    offset_scale: 0.5,
    covariance_scale: 1.5,
};

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Sets one field by dotted path, e.g. `adapter.learning_rate=0.001`.
    /// The value is read as a TOML literal, falling back to a plain string.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| CliError::Config(e.to_string()))?;
        let value = parse_literal(raw);
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| CliError::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("--{key}: {}", e.message())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.model.validate().map_err(|e| cfg(&e))?;
        self.adapter.validate().map_err(|e| cfg(&e))?;
        if self.data.features.is_none() {
            self.data.synthetic.validate().map_err(|e| cfg(&e))?;
            let s = &self.data.synthetic;
            if (s.audio_dim, s.video_dim, s.num_classes) != (self.model.audio_dim, self.model.video_dim, self.model.num_classes) {
                return Err(CliError::Config(format!(
                    "model dims (audio {}, video {}, K {}) do not match data (audio {}, video {}, K {})",
                    self.model.audio_dim, self.model.video_dim, self.model.num_classes, s.audio_dim, s.video_dim, s.num_classes
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.schedule.missing_rate) {
            return Err(CliError::Config("schedule.missing_rate must lie in [0, 1]".into()));
        }
        if self.schedule.length == Some(0) || self.warmup.length == Some(0) {
            return Err(CliError::Config("stream lengths must be >= 1".into()));
        }
        if self.pretrain.batch_size == 0 {
            return Err(CliError::Config("pretrain.batch_size must be >= 1".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(CliError::Config("sweep.seeds must not be empty".into()));
        }
        if self.sweep.methods.is_empty() {
            return Err(CliError::Config("sweep.methods must not be empty".into()));
        }
        if self.sweep.missing_rates.is_empty() || self.sweep.missing_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(CliError::Config("sweep.missing_rates must be a non-empty subset of [0, 1]".into()));
        }
        Ok(())
    }

    /// Fills defaulted-by-absence fields that do not depend on the method, so
    /// a sweep can still vary the method per cell.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.adapter.eta_threshold = Some(c.adapter.effective_eta_threshold(c.model.num_classes));
        if c.warmup.source == WarmupSource::Shifted && c.data.synthetic.domain_shift.is_none() {
            c.data.synthetic.domain_shift = Some(DEFAULT_DOMAIN_SHIFT);
        }
        c
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
