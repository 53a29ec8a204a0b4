//! Self-supervised objectives over class-probability vectors.
//!
//! Every objective has two forms: a plain function over [`ClassProbabilities`]
//! used for reporting, and a graph builder used for gradients. The mutual
//! information estimate between the prediction and the modality source is
//!
//! ```text
//! l_ent = -mean_m H(p_m)        l_div = -H(mean_m p_m)        l_mi = l_ent - l_div
//! ```
//!
//! which is `H(mean) - mean(H) >= 0` by concavity of entropy.

mod midl;

pub use midl::{midl_loss, midl_objective, KlMode, MidlObjective, MidlWeights};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{clamped_ln, AutodiffError, Graph, Tensor, Var};
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{0} requires at least one prediction")]
    Empty(&'static str),
    #[error("objective requires a modality-complete sample, got {0}")]
    IncompleteModality(crate::model::Modality),
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A point on the probability simplex over `K` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities(Vec<f64>);

impl ClassProbabilities {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self, LossError> {
        if probs.is_empty() {
            return Err(LossError::NotSimplex("empty vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LossError::NotSimplex(format!("{probs:?} has a negative or non-finite entry")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(LossError::NotSimplex(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for ClassProbabilities {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Loss terms reported for one adaptation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ent: f64,
    pub l_div: f64,
    pub l_mi: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// Shannon entropy `H(p) = -sum p log p` with `0 log 0 = 0`.
pub fn entropy(p: &ClassProbabilities) -> f64 {
    entropy_slice(p.as_slice())
}

pub(crate) fn entropy_slice(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * clamped_ln(x)).sum::<f64>()
}

/// `KL(p || q)`, with both arguments clamped inside the logarithm.
pub fn kl_divergence(p: &ClassProbabilities, q: &ClassProbabilities) -> f64 {
    p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&a, &b)| a * (clamped_ln(a) - clamped_ln(b)))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiTerms {
    pub l_ent: f64,
    pub l_div: f64,
    pub l_mi: f64,
}

/// Mutual-information estimate from one prediction per available view.
pub fn mi_loss(preds: &[ClassProbabilities]) -> Result<MiTerms, LossError> {
    let n = preds.len();
    if n == 0 {
        return Err(LossError::Empty("mi_loss"));
    }
    let k = preds[0].len();
    let mean_entropy = preds.iter().map(entropy).sum::<f64>() / n as f64;
    let mut mean = vec![0.0; k];
    for p in preds {
        for (m, x) in mean.iter_mut().zip(p.as_slice()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let l_ent = -mean_entropy;
    let l_div = -entropy_slice(&mean);
    Ok(MiTerms {
        l_ent,
        l_div,
        l_mi: l_ent - l_div,
    })
}

/// Tent objective: the prediction entropy.
pub fn tent_loss(pred: &ClassProbabilities) -> f64 {
    entropy(pred)
}

/// SHOT information-maximization objective:
/// `mean_i H(p_i) + sum_k pbar_k log pbar_k`.
pub fn shot_loss(batch: &[ClassProbabilities]) -> Result<f64, LossError> {
    if batch.is_empty() {
        return Err(LossError::Empty("shot_loss"));
    }
    let n = batch.len() as f64;
    let mean_entropy = batch.iter().map(entropy).sum::<f64>() / n;
    let mut mean = vec![0.0; batch[0].len()];
    for p in batch {
        for (m, x) in mean.iter_mut().zip(p.as_slice()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean_entropy - entropy_slice(&mean))
}

/// ETA sample weight: `exp(e0 - H(p))` below the entropy margin, `0` at or above it.
pub fn eta_weight(pred: &ClassProbabilities, e0: f64) -> f64 {
    let h = entropy(pred);
    if h >= e0 {
        0.0
    } else {
        1.0 / (h - e0).exp()
    }
}

/// Default ETA entropy margin, `0.4 * ln K`.
pub fn default_eta_threshold(num_classes: usize) -> f64 {
    0.4 * (num_classes as f64).ln()
}

/// Per-row entropy `[B, K] -> [B]`.
pub fn entropy_rows(g: &mut Graph, p: Var) -> Var {
    let logp = g.log(p);
    let plogp = g.mul(p, logp).expect("same shape");
    let s = g.sum_rows(plogp);
    g.neg(s)
}

/// Per-row `KL(p || target)` against a constant target, `[B, K] -> [B]`.
pub fn kl_rows(g: &mut Graph, p: Var, target: &Tensor) -> Result<Var, AutodiffError> {
    let logq = g.constant(target.map(clamped_ln));
    let logp = g.log(p);
    let diff = g.sub(logp, logq)?;
    let prod = g.mul(p, diff)?;
    Ok(g.sum_rows(prod))
}

/// Batch-mean Tent objective.
pub fn tent_objective(g: &mut Graph, p: Var) -> Var {
    let h = entropy_rows(g, p);
    g.mean(h)
}

/// SHOT-IM objective over the rows of `p`.
pub fn shot_objective(g: &mut Graph, p: Var) -> Var {
    let h = entropy_rows(g, p);
    let mean_h = g.mean(h);
    let pbar = g.mean_rows(p);
    let div = entropy_rows(g, pbar);
    let div = g.sum(div);
    g.sub(mean_h, div).expect("scalars")
}

/// ETA objective: mean over rows of `weights[i] * H(p_i)` restricted to rows
/// with nonzero weight. `None` when every row is filtered out.
pub fn eta_objective(g: &mut Graph, p: Var, e0: f64) -> Option<Var> {
    let (rows, _) = g.value(p).dims2();
    let weights: Vec<f64> = (0..rows)
        .map(|r| {
            let row = ClassProbabilities::new_unchecked(g.value(p).row(r).to_vec());
            eta_weight(&row, e0)
        })
        .collect();
    let kept = weights.iter().filter(|&&w| w > 0.0).count();
    if kept == 0 {
        return None;
    }
    let h = entropy_rows(g, p);
    let w = g.constant(Tensor::vector(weights));
    let weighted = g.mul(h, w).expect("same shape");
    let s = g.sum(weighted);
    Some(g.scale(s, 1.0 / kept as f64))
}
