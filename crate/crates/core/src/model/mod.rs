//! Two-branch multimodal classifier with learnable normalization layers.
//!
//! Each modality has an MLP encoder (`affine -> standardize -> scale/shift ->
//! relu`, repeated). The encoder outputs are fused, normalized again and fed
//! to a linear head followed by softmax. A missing modality is zero-filled on
//! the raw input features before encoding.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::MultimodalSample;
use crate::losses::ClassProbabilities;

/// Epsilon inside the normalization layers.
pub const NORM_EPS: f64 = 1e-5;

/// Which modalities a revealed sample carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Video,
    #[serde(rename = "AV")]
    AudioVisual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Video, Modality::AudioVisual];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "A",
            Modality::Video => "V",
            Modality::AudioVisual => "AV",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Audio => 0,
            Modality::Video => 1,
            Modality::AudioVisual => 2,
        }
    }

    pub fn has_audio(self) -> bool {
        self != Modality::Video
    }

    pub fn has_video(self) -> bool {
        self != Modality::Audio
    }

    pub fn is_complete(self) -> bool {
        self == Modality::AudioVisual
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Concat,
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub encoder_layers: usize,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio_dim: 16,
            video_dim: 16,
            hidden_dim: 32,
            num_classes: 8,
            encoder_layers: 1,
            fusion: Fusion::Gated,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("audio_dim", self.audio_dim),
            ("video_dim", self.video_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Number of normalization layers (each contributes a scale and a shift).
    pub fn norm_layer_count(&self) -> usize {
        2 * self.encoder_layers + 1
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Which parameters an optimizer may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterSelection {
    #[default]
    NormLayersOnly,
    AllParameters,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    scale: usize,
    shift: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    audio: Vec<(Affine, Norm)>,
    video: Vec<(Affine, Norm)>,
    fusion: Affine,
    fusion_norm: Norm,
    head: Affine,
}

#[derive(Clone, Debug)]
pub struct MultimodalClassifier {
    config: ModelConfig,
    params: Vec<Parameter>,
    layout: Layout,
}

/// Bag of `(sample, modality)` rows ready for a batched forward pass.
pub type BatchRows<'a> = [(&'a MultimodalSample, Modality)];

impl MultimodalClassifier {
    /// Fresh model with seeded `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights,
    /// unit norm scales and zero norm shifts.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let h = config.hidden_dim;

        let encoder = |prefix: &str, input: usize, params: &mut Vec<Parameter>, rng: &mut ChaCha8Rng| {
            let mut layers = Vec::new();
            let mut fan_in = input;
            for l in 0..config.encoder_layers {
                let affine = push_affine(params, rng, &format!("{prefix}.layer{l}"), fan_in, h);
                let norm = push_norm(params, &format!("{prefix}.layer{l}.norm"), h);
                layers.push((affine, norm));
                fan_in = h;
            }
            layers
        };
        let audio = encoder("audio", config.audio_dim, &mut params, &mut rng);
        let video = encoder("video", config.video_dim, &mut params, &mut rng);
        let fusion = push_affine(&mut params, &mut rng, "fusion", 2 * h, h);
        let fusion_norm = push_norm(&mut params, "fusion.norm", h);
        let head = push_affine(&mut params, &mut rng, "head", h, config.num_classes);

        Ok(Self {
            config,
            params,
            layout: Layout {
                audio,
                video,
                fusion,
                fusion_norm,
                head,
            },
        })
    }

    /// Rebuilds a model from named parameters, checking names and shapes.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() || slot.kind != p.kind {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Indices of the tensors an optimizer may update under `sel`.
    pub fn select_parameters(&self, sel: ParameterSelection) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| match sel {
                ParameterSelection::AllParameters => true,
                ParameterSelection::NormLayersOnly => p.kind.is_norm(),
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Deep copy used as the fixed reference model.
    pub fn clone_parameters(&self) -> FrozenModel {
        FrozenModel(self.clone())
    }

    /// Registers every parameter in `g`; indices in `trainable` become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: &[usize]) -> Vec<Var> {
        let mut flags = vec![false; self.params.len()];
        for &i in trainable {
            flags[i] = true;
        }
        self.params
            .iter()
            .zip(flags)
            .map(|(p, train)| {
                if train {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Zero-filled input matrices for a batch of rows.
    pub fn inputs(&self, rows: &BatchRows<'_>) -> Result<(Tensor, Tensor), ModelError> {
        let (da, dv) = (self.config.audio_dim, self.config.video_dim);
        let mut audio = vec![0.0; rows.len() * da];
        let mut video = vec![0.0; rows.len() * dv];
        for (r, (sample, m)) in rows.iter().enumerate() {
            if sample.audio.len() != da || sample.video.len() != dv {
                return Err(ModelError::Config(format!(
                    "sample feature widths ({}, {}) do not match model ({da}, {dv})",
                    sample.audio.len(),
                    sample.video.len()
                )));
            }
            if m.has_audio() {
                audio[r * da..(r + 1) * da].copy_from_slice(&sample.audio);
            }
            if m.has_video() {
                video[r * dv..(r + 1) * dv].copy_from_slice(&sample.video);
            }
        }
        Ok((
            Tensor::matrix(rows.len(), da, audio),
            Tensor::matrix(rows.len(), dv, video),
        ))
    }

    /// Logits `[batch, K]` for bound parameters.
    pub fn logits_bound(&self, g: &mut Graph, vars: &[Var], rows: &BatchRows<'_>) -> Result<Var, ModelError> {
        let (audio, video) = self.inputs(rows)?;
        let audio = g.constant(audio);
        let video = g.constant(video);
        let ha = encode(g, vars, &self.layout.audio, audio)?;
        let hv = encode(g, vars, &self.layout.video, video)?;
        let joint = g.concat(ha, hv)?;
        let f = self.layout.fusion;
        let fused = match self.config.fusion {
            Fusion::Concat => {
                let z = g.matmul(joint, vars[f.weight])?;
                g.add_row(z, vars[f.bias])?
            }
            Fusion::Gated => {
                let z = g.matmul(joint, vars[f.weight])?;
                let z = g.add_row(z, vars[f.bias])?;
                let gate = g.sigmoid(z);
                let rest = g.neg(gate);
                let rest = g.add_scalar(rest, 1.0);
                let a = g.mul(gate, ha)?;
                let v = g.mul(rest, hv)?;
                g.add(a, v)?
            }
        };
        let fused = normalize(g, vars, self.layout.fusion_norm, fused)?;
        let fused = g.relu(fused);
        let head = self.layout.head;
        let logits = g.matmul(fused, vars[head.weight])?;
        Ok(g.add_row(logits, vars[head.bias])?)
    }

    /// Class probabilities `[batch, K]` for bound parameters.
    pub fn forward_bound(&self, g: &mut Graph, vars: &[Var], rows: &BatchRows<'_>) -> Result<Var, ModelError> {
        let logits = self.logits_bound(g, vars, rows)?;
        Ok(g.softmax(logits))
    }

    pub fn forward(&self, sample: &MultimodalSample, m: Modality) -> Result<ClassProbabilities, ModelError> {
        Ok(self.forward_batch(&[(sample, m)])?.remove(0))
    }

    pub fn forward_batch(&self, rows: &BatchRows<'_>) -> Result<Vec<ClassProbabilities>, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, &[]);
        let p = self.forward_bound(&mut g, &vars, rows)?;
        Ok(split_rows(g.value(p)))
    }
}

/// Read-only snapshot of a model's parameters.
#[derive(Clone, Debug)]
pub struct FrozenModel(MultimodalClassifier);

impl FrozenModel {
    pub fn model(&self) -> &MultimodalClassifier {
        &self.0
    }

    pub fn forward(&self, sample: &MultimodalSample, m: Modality) -> Result<ClassProbabilities, ModelError> {
        self.0.forward(sample, m)
    }

    pub fn forward_batch(&self, rows: &BatchRows<'_>) -> Result<Vec<ClassProbabilities>, ModelError> {
        self.0.forward_batch(rows)
    }

    pub fn thaw(&self) -> MultimodalClassifier {
        self.0.clone()
    }
}

pub(crate) fn split_rows(t: &Tensor) -> Vec<ClassProbabilities> {
    let (rows, _) = t.dims2();
    (0..rows)
        .map(|r| ClassProbabilities::new_unchecked(t.row(r).to_vec()))
        .collect()
}

fn encode(g: &mut Graph, vars: &[Var], layers: &[(Affine, Norm)], input: Var) -> Result<Var, ModelError> {
    let mut h = input;
    for &(affine, norm) in layers {
        h = g.matmul(h, vars[affine.weight])?;
        h = g.add_row(h, vars[affine.bias])?;
        h = normalize(g, vars, norm, h)?;
        h = g.relu(h);
    }
    Ok(h)
}

fn normalize(g: &mut Graph, vars: &[Var], norm: Norm, x: Var) -> Result<Var, ModelError> {
    let h = g.standardize(x, NORM_EPS);
    let h = g.mul_row(h, vars[norm.scale])?;
    Ok(g.add_row(h, vars[norm.shift])?)
}

fn push_affine(params: &mut Vec<Parameter>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Affine {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    params.push(Parameter {
        name: format!("{name}.weight"),
        kind: ParamKind::Weight,
        value: Tensor::matrix(fan_in, fan_out, w),
    });
    params.push(Parameter {
        name: format!("{name}.bias"),
        kind: ParamKind::Bias,
        value: Tensor::vector(b),
    });
    Affine {
        weight: params.len() - 2,
        bias: params.len() - 1,
    }
}

fn push_norm(params: &mut Vec<Parameter>, name: &str, width: usize) -> Norm {
    params.push(Parameter {
        name: format!("{name}.scale"),
        kind: ParamKind::NormScale,
        value: Tensor::full(&[width], 1.0),
    });
    params.push(Parameter {
        name: format!("{name}.shift"),
        kind: ParamKind::NormShift,
        value: Tensor::zeros(&[width]),
    });
    Norm {
        scale: params.len() - 2,
        shift: params.len() - 1,
    }
}
