//! Datasets: synthetic multimodal generation, feature-file ingestion and
//! supervised pretraining of the initial classifier.

mod features;
mod pretrain;

pub use features::{load_features, read_features, save_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use pretrain::{accuracy, pretrain, pretrain_suite, PretrainConfig, PretrainReport, PretrainedSuite};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("feature file parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("empty dataset")]
    Empty,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One multimodal observation with its hidden label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub audio: Vec<f64>,
    pub video: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.is_empty() {
            return Err(DataError::Empty);
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.audio.len() != self.audio_dim || s.video.len() != self.video_dim {
                return Err(DataError::Config(format!("sample {i} has wrong feature widths")));
            }
            if s.label >= self.num_classes {
                return Err(DataError::Config(format!("sample {i} label {} >= K = {}", s.label, self.num_classes)));
            }
            if s.audio.iter().chain(&s.video).any(|v| !v.is_finite()) {
                return Err(DataError::Config(format!("sample {i} has non-finite features")));
            }
        }
        Ok(())
    }

    /// Checks that the dataset can be fed to a model with `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<(), DataError> {
        if self.audio_dim != config.audio_dim || self.video_dim != config.video_dim || self.num_classes != config.num_classes {
            return Err(DataError::Config(format!(
                "dataset (K={}, audio={}, video={}) does not match model (K={}, audio={}, video={})",
                self.num_classes, self.audio_dim, self.video_dim, config.num_classes, config.audio_dim, config.video_dim
            )));
        }
        Ok(())
    }

    /// Seeded 80/20 train/validation split.
    pub fn split(self, seed: u64) -> DatasetSplit {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng_stream(seed, STREAM_SPLIT));
        let n_train = self.samples.len() * 4 / 5;
        let mut slots: Vec<Option<MultimodalSample>> = self.samples.into_iter().map(Some).collect();
        let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("unique index")).collect::<Vec<_>>();
        let train = take(&order[..n_train]);
        let val = take(&order[n_train..]);
        let shell = |samples| Dataset {
            num_classes: self.num_classes,
            audio_dim: self.audio_dim,
            video_dim: self.video_dim,
            samples,
        };
        DatasetSplit {
            train: shell(train),
            val: shell(val),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
}

/// Covariate shift applied by [`generate_shifted`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Per-feature mean offset, in units of `class_separation`.
    pub offset_scale: f64,
    /// Multiplier on the noise standard deviation.
    pub covariance_scale: f64,
}

/// Parameters of the synthetic two-modality class-latent generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub latent_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub modality_correlation: f64,
    pub noise_sigma: f64,
    /// Scale of a fixed per-feature baseline added to every sample, so that
    /// real features sit away from the zero vector used for missing inputs.
    pub feature_offset: f64,
    pub domain_shift: Option<DomainShift>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            audio_dim: 16,
            video_dim: 16,
            latent_dim: 8,
            samples_per_class: 625,
            class_separation: 1.0,
            modality_correlation: 0.6,
            noise_sigma: 1.0,
            feature_offset: 3.0,
            domain_shift: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.audio_dim == 0 || self.video_dim == 0 || self.latent_dim == 0 {
            return bad("feature and latent widths must be >= 1");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be >= 1");
        }
        if !(self.class_separation > 0.0) {
            return bad("class_separation must be > 0");
        }
        if !(self.noise_sigma > 0.0) {
            return bad("noise_sigma must be > 0");
        }
        if !(self.feature_offset >= 0.0) {
            return bad("feature_offset must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.modality_correlation) {
            return bad("modality_correlation must lie in [0, 1]");
        }
        if let Some(shift) = &self.domain_shift {
            if !(shift.offset_scale >= 0.0) || !(shift.covariance_scale > 0.0) {
                return bad("domain_shift needs offset_scale >= 0 and covariance_scale > 0");
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            audio_dim: self.audio_dim,
            video_dim: self.video_dim,
            num_classes: self.num_classes,
            ..ModelConfig::default()
        }
    }
}

// ChaCha stream ids; one seed drives several independent streams.
const STREAM_STRUCTURE: u64 = 0;
const STREAM_SAMPLES: u64 = 1;
const STREAM_SHIFTED_SAMPLES: u64 = 2;
const STREAM_OFFSET: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_BASELINE: u64 = 5;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Class centers in latent space plus the two modality projections.
struct Structure {
    centers: Vec<Vec<f64>>,
    audio_proj: Vec<f64>,
    video_proj: Vec<f64>,
    audio_base: Vec<f64>,
    video_base: Vec<f64>,
}

impl Structure {
    fn draw(spec: &SyntheticSpec, seed: u64) -> Self {
        let mut rng = rng_stream(seed, STREAM_STRUCTURE);
        let centers = (0..spec.num_classes)
            .map(|_| normals(&mut rng, spec.latent_dim).into_iter().map(|v| v * spec.class_separation).collect())
            .collect();
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let mut proj = |rows: usize| normals(&mut rng, rows * spec.latent_dim).into_iter().map(|v| v * scale).collect();
        let audio_proj = proj(spec.audio_dim);
        let video_proj = proj(spec.video_dim);
        let mut rng = rng_stream(seed, STREAM_BASELINE);
        let mut base = |n: usize| normals(&mut rng, n).into_iter().map(|v| v * spec.feature_offset).collect();
        let audio_base = base(spec.audio_dim);
        let video_base = base(spec.video_dim);
        Self {
            centers,
            audio_proj,
            video_proj,
            audio_base,
            video_base,
        }
    }

    fn project(proj: &[f64], z: &[f64], out_dim: usize) -> Vec<f64> {
        let l = z.len();
        (0..out_dim).map(|i| proj[i * l..(i + 1) * l].iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn generate(spec: &SyntheticSpec, seed: u64, stream: u64, shift: Option<&DomainShift>) -> Dataset {
    let structure = Structure::draw(spec, seed);
    let (offset_a, offset_v, noise_scale) = match shift {
        Some(s) => {
            let mut rng = rng_stream(seed, STREAM_OFFSET);
            let k = s.offset_scale * spec.class_separation;
            let a = normals(&mut rng, spec.audio_dim).into_iter().map(|v| v * k).collect();
            let v = normals(&mut rng, spec.video_dim).into_iter().map(|v| v * k).collect();
            (a, v, s.covariance_scale)
        }
        None => (vec![0.0; spec.audio_dim], vec![0.0; spec.video_dim], 1.0),
    };
    let sigma = spec.noise_sigma * noise_scale;
    let rho = spec.modality_correlation;
    let independent = (1.0 - rho * rho).sqrt();

    let mut rng = rng_stream(seed, stream);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, z) in structure.centers.iter().enumerate() {
        let mut audio_mean = Structure::project(&structure.audio_proj, z, spec.audio_dim);
        let mut video_mean = Structure::project(&structure.video_proj, z, spec.video_dim);
        audio_mean.iter_mut().zip(&structure.audio_base).for_each(|(m, b)| *m += b);
        video_mean.iter_mut().zip(&structure.video_base).for_each(|(m, b)| *m += b);
        for _ in 0..spec.samples_per_class {
            let eps_a = normals(&mut rng, spec.audio_dim);
            let eps_v = normals(&mut rng, spec.video_dim);
            let audio = (0..spec.audio_dim)
                .map(|i| quantize(audio_mean[i] + offset_a[i] + sigma * eps_a[i]))
                .collect();
            let video = (0..spec.video_dim)
                .map(|j| {
                    let shared = eps_a[j % spec.audio_dim];
                    quantize(video_mean[j] + offset_v[j] + sigma * (rho * shared + independent * eps_v[j]))
                })
                .collect();
            samples.push(MultimodalSample { audio, video, label });
        }
    }
    Dataset {
        num_classes: spec.num_classes,
        audio_dim: spec.audio_dim,
        video_dim: spec.video_dim,
        samples,
    }
}

/// Draws class latents, projects them into both modalities, adds
/// correlation-mixed Gaussian noise and splits 80/20. Features are rounded to
/// `f32` precision so the feature-file format stores them losslessly.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetSplit, DataError> {
    spec.validate()?;
    Ok(generate(spec, seed, STREAM_SAMPLES, None).split(seed))
}

/// Same class structure as [`generate_synthetic`] with the same `seed`, but
/// fresh samples drawn under `spec.domain_shift`.
pub fn generate_shifted(spec: &SyntheticSpec, seed: u64) -> Result<DatasetSplit, DataError> {
    spec.validate()?;
    let shift = spec
        .domain_shift
        .as_ref()
        .ok_or_else(|| DataError::Spec("generate_shifted requires domain_shift".into()))?;
    Ok(generate(spec, seed, STREAM_SHIFTED_SAMPLES, Some(shift)).split(seed))
}
