use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{rng_stream, DataError, Dataset, DatasetSplit};
use crate::adapt::SgdMomentum;
use crate::autodiff::{Graph, Tensor};
use crate::model::{Modality, ModelConfig, MultimodalClassifier, ParameterSelection};
use crate::stream::argmax_label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Modality the model was trained and evaluated on.
    pub modality: Modality,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// The multimodal model plus the two single-modality references.
#[derive(Clone, Debug)]
pub struct PretrainedSuite {
    pub multimodal: MultimodalClassifier,
    pub audio_only: MultimodalClassifier,
    pub video_only: MultimodalClassifier,
    pub reports: Vec<PretrainReport>,
}

const EVAL_CHUNK: usize = 256;

/// Fraction of `dataset` classified correctly with every sample shown as `m`.
pub fn accuracy(model: &MultimodalClassifier, dataset: &Dataset, m: Modality) -> Result<f64, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let mut correct = 0usize;
    for chunk in dataset.samples.chunks(EVAL_CHUNK) {
        let rows: Vec<_> = chunk.iter().map(|s| (s, m)).collect();
        for (p, s) in model.forward_batch(&rows)?.iter().zip(chunk) {
            correct += usize::from(argmax_label(p) == s.label);
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Trains a fresh model with mini-batch SGD on cross-entropy, feeding every
/// sample as modality `m`.
pub fn pretrain(
    model_config: &ModelConfig,
    train: &Dataset,
    val: &Dataset,
    config: &PretrainConfig,
    m: Modality,
) -> Result<(MultimodalClassifier, PretrainReport), DataError> {
    train.validate()?;
    train.check_compatible(model_config)?;
    if config.batch_size == 0 {
        return Err(DataError::Config("batch_size must be >= 1".into()));
    }
    // distinct init per modality so the three suite members are independent
    let mut model = MultimodalClassifier::new(model_config.clone(), config.seed.wrapping_add(m.index() as u64))?;
    let selected = model.select_parameters(ParameterSelection::AllParameters);
    let mut opt = SgdMomentum::new(&model, &selected, config.learning_rate, config.momentum);
    let mut rng = rng_stream(config.seed, 16 + m.index() as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let k = model_config.num_classes;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let rows: Vec<_> = batch.iter().map(|&i| (&train.samples[i], m)).collect();
            let mut onehot = vec![0.0; batch.len() * k];
            for (r, &i) in batch.iter().enumerate() {
                onehot[r * k + train.samples[i].label] = 1.0;
            }
            let mut g = Graph::new();
            let vars = model.bind(&mut g, &selected);
            let p = model.forward_bound(&mut g, &vars, &rows)?;
            let logp = g.log(p);
            let y = g.constant(Tensor::matrix(batch.len(), k, onehot));
            let picked = g.mul(logp, y).expect("same shape");
            let s = g.sum(picked);
            let loss = g.scale(s, -1.0 / batch.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(DataError::Diverged(format!("non-finite loss {value} in epoch {epoch}")));
            }
            total += value * batch.len() as f64;
            g.backward(loss).expect("scalar loss");
            let grads: Vec<Tensor> = selected.iter().map(|&i| g.grad(vars[i])).collect();
            opt.step(&mut model, &grads).expect("matching shapes");
            if model.parameters().iter().any(|p| !p.value.is_finite()) {
                return Err(DataError::Diverged(format!("non-finite parameters in epoch {epoch}")));
            }
        }
        epoch_losses.push(total / train.len() as f64);
    }

    let report = PretrainReport {
        modality: m,
        epochs: config.epochs,
        epoch_losses,
        train_accuracy: accuracy(&model, train, m)?,
        val_accuracy: accuracy(&model, val, m)?,
    };
    Ok((model, report))
}

/// Trains the multimodal model and both single-modality references.
pub fn pretrain_suite(model_config: &ModelConfig, split: &DatasetSplit, config: &PretrainConfig) -> Result<PretrainedSuite, DataError> {
    let (multimodal, r_av) = pretrain(model_config, &split.train, &split.val, config, Modality::AudioVisual)?;
    let (audio_only, r_a) = pretrain(model_config, &split.train, &split.val, config, Modality::Audio)?;
    let (video_only, r_v) = pretrain(model_config, &split.train, &split.val, config, Modality::Video)?;
    Ok(PretrainedSuite {
        multimodal,
        audio_only,
        video_only,
        reports: vec![r_av, r_a, r_v],
    })
}
