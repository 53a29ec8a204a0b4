//! Online adaptation policies.
//!
//! An [`Adapter`] owns the live model, the frozen initial copy and the
//! optimizer state. Each call to [`Adapter::on_batch`] predicts every revealed
//! row with the current parameters first, then (depending on the method) takes
//! at most one gradient step. The MiDl family only steps on
//! modality-complete rows; the entropy baselines step on whatever forward pass
//! is available.

mod optimizer;

pub use optimizer::{sgd_step, SgdMomentum};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::MultimodalSample;
use crate::losses::{
    self, default_eta_threshold, midl_objective, ClassProbabilities, KlMode, LossBreakdown, LossError, MidlWeights,
};
use crate::model::{split_rows, BatchRows, FrozenModel, Modality, ModelError, MultimodalClassifier, ParameterSelection};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("gradient shape {grad:?} does not match parameter shape {param:?}")]
    ShapeMismatch { param: Vec<usize>, grad: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Midl,
    MiOnly,
    DlOnly,
    Tent,
    Shot,
    Eta,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::None,
        Method::Midl,
        Method::MiOnly,
        Method::DlOnly,
        Method::Tent,
        Method::Shot,
        Method::Eta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Midl => "midl",
            Method::MiOnly => "mi_only",
            Method::DlOnly => "dl_only",
            Method::Tent => "tent",
            Method::Shot => "shot",
            Method::Eta => "eta",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s.replace('-', "_"))
    }

    fn is_midl_family(self) -> bool {
        matches!(self, Method::Midl | Method::MiOnly | Method::DlOnly)
    }

    /// Batch size used when none is configured.
    pub fn default_batch_size(self) -> usize {
        // the SHOT diversity term vanishes identically on a single sample
        if self == Method::Shot {
            8
        } else {
            1
        }
    }
}

/// Which rows the entropy baselines adapt on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineScope {
    #[default]
    AllSamples,
    CompleteOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_mi: f64,
    pub lambda_kl: f64,
    pub params: ParameterSelection,
    pub kl_mode: KlMode,
    /// ETA entropy margin; `0.4 ln K` when unset.
    pub eta_threshold: Option<f64>,
    /// Rows revealed per step; method default when unset.
    pub batch_size: Option<usize>,
    pub baseline_scope: BaselineScope,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            method: Method::Midl,
            learning_rate: 25e-4,
            momentum: 0.9,
            lambda_mi: 3.0,
            lambda_kl: 3.0,
            params: ParameterSelection::NormLayersOnly,
            kl_mode: KlMode::AvOnly,
            eta_threshold: None,
            batch_size: None,
            baseline_scope: BaselineScope::AllSamples,
        }
    }
}

impl AdapterConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.learning_rate > 0.0) {
            return Err(AdaptError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AdaptError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == Some(0) {
            return Err(AdaptError::Config("batch_size must be >= 1".into()));
        }
        if let Some(e0) = self.eta_threshold {
            if !(e0 > 0.0) {
                return Err(AdaptError::Config("eta_threshold must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or_else(|| self.method.default_batch_size())
    }

    pub fn effective_eta_threshold(&self, num_classes: usize) -> f64 {
        self.eta_threshold.unwrap_or_else(|| default_eta_threshold(num_classes))
    }

    fn midl_weights(&self) -> MidlWeights {
        match self.method {
            Method::MiOnly => MidlWeights {
                mi: self.lambda_mi,
                kl: 0.0,
            },
            Method::DlOnly => MidlWeights {
                mi: 0.0,
                kl: self.lambda_kl,
            },
            _ => MidlWeights {
                mi: self.lambda_mi,
                kl: self.lambda_kl,
            },
        }
    }
}

/// Forward/backward pass counts, one unit per batched pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCounters {
    pub forwards_live: u64,
    pub forwards_frozen: u64,
    pub backwards: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// One prediction per revealed row, made before any update.
    pub predictions: Vec<ClassProbabilities>,
    pub adapted: bool,
    pub losses: Option<LossBreakdown>,
}

/// Adaptation state: live parameters, frozen initial copy, optimizer buffers.
#[derive(Clone, Debug)]
pub struct Adapter {
    config: AdapterConfig,
    model: MultimodalClassifier,
    frozen: FrozenModel,
    selected: Vec<usize>,
    optimizer: SgdMomentum,
    steps: u64,
    counters: ComputeCounters,
}

impl Adapter {
    pub fn new(model: MultimodalClassifier, config: AdapterConfig) -> Result<Self, AdaptError> {
        config.validate()?;
        let frozen = model.clone_parameters();
        let selected = model.select_parameters(config.params);
        let optimizer = SgdMomentum::new(&model, &selected, config.learning_rate, config.momentum);
        Ok(Self {
            config,
            model,
            frozen,
            selected,
            optimizer,
            steps: 0,
            counters: ComputeCounters::default(),
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn model(&self) -> &MultimodalClassifier {
        &self.model
    }

    pub fn frozen(&self) -> &FrozenModel {
        &self.frozen
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn optimizer(&self) -> &SgdMomentum {
        &self.optimizer
    }

    /// Number of parameter updates taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn count_compute(&self) -> ComputeCounters {
        self.counters
    }

    /// Names of parameters whose values differ from the frozen copy.
    pub fn changed_parameters(&self) -> Vec<String> {
        self.model
            .parameters()
            .iter()
            .zip(self.frozen.model().parameters())
            .filter(|(a, b)| a.value != b.value)
            .map(|(a, _)| a.name.clone())
            .collect()
    }

    /// Largest absolute parameter difference from the frozen copy.
    pub fn max_parameter_drift(&self) -> f64 {
        self.model
            .parameters()
            .iter()
            .zip(self.frozen.model().parameters())
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn on_sample(&mut self, sample: &MultimodalSample, m: Modality) -> Result<(ClassProbabilities, bool), AdaptError> {
        let mut out = self.on_batch(&[(sample, m)])?;
        Ok((out.predictions.remove(0), out.adapted))
    }

    /// Predicts every row with the current parameters, then adapts.
    pub fn on_batch(&mut self, rows: &BatchRows<'_>) -> Result<StepOutcome, AdaptError> {
        if rows.is_empty() {
            return Err(AdaptError::Contract("empty batch".into()));
        }
        let trainable: &[usize] = if self.config.method == Method::None { &[] } else { &self.selected };
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, trainable);
        let probs = self.model.forward_bound(&mut g, &vars, rows)?;
        self.counters.forwards_live += 1;
        let predictions = split_rows(g.value(probs));

        let step = match self.config.method {
            Method::None => None,
            m if m.is_midl_family() => self.midl_step(&mut g, &vars, rows, probs)?,
            _ => self.baseline_step(&mut g, rows, probs)?,
        };
        let (adapted, losses) = match step {
            Some((loss, breakdown)) => {
                g.backward(loss)?;
                self.counters.backwards += 1;
                let grads: Vec<Tensor> = self.selected.iter().map(|&i| g.grad(vars[i])).collect();
                self.optimizer.step(&mut self.model, &grads)?;
                self.steps += 1;
                (true, Some(breakdown))
            }
            None => (false, None),
        };
        Ok(StepOutcome {
            predictions,
            adapted,
            losses,
        })
    }

    fn midl_step(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        rows: &BatchRows<'_>,
        probs: Var,
    ) -> Result<Option<(Var, LossBreakdown)>, AdaptError> {
        let complete: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].1.is_complete()).collect();
        if complete.is_empty() {
            return Ok(None);
        }
        let av_view = if complete.len() == rows.len() {
            probs
        } else {
            g.select_rows(probs, &complete)?
        };
        let samples: Vec<&MultimodalSample> = complete.iter().map(|&i| rows[i].0).collect();
        let obj = midl_objective(
            g,
            &self.model,
            vars,
            &self.frozen,
            &samples,
            Some(av_view),
            self.config.midl_weights(),
            self.config.kl_mode,
        )?;
        self.counters.forwards_live += obj.live_passes;
        self.counters.forwards_frozen += obj.frozen_passes;
        Ok(Some((obj.total, obj.breakdown)))
    }

    fn baseline_step(&mut self, g: &mut Graph, rows: &BatchRows<'_>, probs: Var) -> Result<Option<(Var, LossBreakdown)>, AdaptError> {
        let p = match self.config.baseline_scope {
            BaselineScope::AllSamples => probs,
            BaselineScope::CompleteOnly => {
                let complete: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].1.is_complete()).collect();
                if complete.is_empty() {
                    return Ok(None);
                }
                if complete.len() == rows.len() {
                    probs
                } else {
                    g.select_rows(probs, &complete)?
                }
            }
        };
        let h = losses::entropy_rows(g, p);
        let mean_h = g.mean(h);
        let l_ent = -g.value(mean_h).item();
        let (loss, l_div) = match self.config.method {
            Method::Tent => (mean_h, 0.0),
            Method::Shot => {
                let pbar = g.mean_rows(p);
                let hbar = losses::entropy_rows(g, pbar);
                let hbar = g.sum(hbar);
                let l_div = -g.value(hbar).item();
                (g.sub(mean_h, hbar)?, l_div)
            }
            Method::Eta => {
                let e0 = self.config.effective_eta_threshold(self.model.config().num_classes);
                match losses::eta_objective(g, p, e0) {
                    Some(v) => (v, 0.0),
                    None => return Ok(None),
                }
            }
            other => unreachable!("{other:?} is not a baseline"),
        };
        let breakdown = LossBreakdown {
            l_ent,
            l_div,
            l_mi: 0.0,
            l_kl: 0.0,
            total: g.value(loss).item(),
        };
        Ok(Some((loss, breakdown)))
    }
}

#[cfg(test)]
mod tests;
