use serde::{Deserialize, Serialize};

use super::{entropy_rows, kl_rows, LossBreakdown, LossError};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::MultimodalSample;
use crate::model::{FrozenModel, Modality, MultimodalClassifier};

/// Which predictions the self-distillation term compares to the frozen model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Only the audio-visual prediction.
    #[default]
    AvOnly,
    /// Mean of the KL terms over the A, V and AV predictions.
    PerModality,
}

/// Multipliers on the mutual-information and distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidlWeights {
    pub mi: f64,
    pub kl: f64,
}

impl Default for MidlWeights {
    fn default() -> Self {
        Self { mi: 3.0, kl: 3.0 }
    }
}

/// A built MiDl loss graph.
pub struct MidlObjective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Live-model forward passes issued while building the objective.
    pub live_passes: u64,
    /// Frozen-model forward passes issued while building the objective.
    pub frozen_passes: u64,
}

/// Builds `weights.mi * l_mi + weights.kl * l_kl` for modality-complete rows.
///
/// `av_view` may carry an already computed AV prediction for exactly these
/// rows, in which case only the A and V views are evaluated here.
#[allow(clippy::too_many_arguments)]
pub fn midl_objective(
    g: &mut Graph,
    model: &MultimodalClassifier,
    vars: &[Var],
    frozen: &FrozenModel,
    samples: &[&MultimodalSample],
    av_view: Option<Var>,
    weights: MidlWeights,
    kl_mode: KlMode,
) -> Result<MidlObjective, LossError> {
    if samples.is_empty() {
        return Err(LossError::Empty("midl_objective"));
    }
    let rows_for = |m: Modality| samples.iter().map(|&s| (s, m)).collect::<Vec<_>>();
    let mut live_passes = 0;
    let p_av = match av_view {
        Some(v) => v,
        None => {
            live_passes += 1;
            model.forward_bound(g, vars, &rows_for(Modality::AudioVisual))?
        }
    };
    let p_a = model.forward_bound(g, vars, &rows_for(Modality::Audio))?;
    let p_v = model.forward_bound(g, vars, &rows_for(Modality::Video))?;
    live_passes += 2;

    let h_a = entropy_rows(g, p_a);
    let h_v = entropy_rows(g, p_v);
    let h_av = entropy_rows(g, p_av);
    let h_sum = g.add(h_a, h_v)?;
    let h_sum = g.add(h_sum, h_av)?;
    let h_mean = g.scale(h_sum, 1.0 / 3.0);
    let h_mean = g.mean(h_mean);
    let l_ent = g.neg(h_mean);

    let p_sum = g.add(p_a, p_v)?;
    let p_sum = g.add(p_sum, p_av)?;
    let p_bar = g.scale(p_sum, 1.0 / 3.0);
    let h_bar = entropy_rows(g, p_bar);
    let h_bar = g.mean(h_bar);
    let l_div = g.neg(h_bar);
    let l_mi = g.sub(l_ent, l_div)?;

    let target = |m: Modality| -> Result<Tensor, LossError> {
        let probs = frozen.forward_batch(&rows_for(m))?;
        let rows: Vec<Vec<f64>> = probs.into_iter().map(|p| p.as_slice().to_vec()).collect();
        Ok(Tensor::from_rows(&rows)?)
    };
    let (l_kl, frozen_passes) = match kl_mode {
        KlMode::AvOnly => {
            let kl = kl_rows(g, p_av, &target(Modality::AudioVisual)?)?;
            (g.mean(kl), 1)
        }
        KlMode::PerModality => {
            let mut acc: Option<Var> = None;
            for (view, m) in [(p_a, Modality::Audio), (p_v, Modality::Video), (p_av, Modality::AudioVisual)] {
                let kl = kl_rows(g, view, &target(m)?)?;
                let kl = g.mean(kl);
                acc = Some(match acc {
                    Some(a) => g.add(a, kl)?,
                    None => kl,
                });
            }
            (g.scale(acc.expect("three views"), 1.0 / 3.0), 3)
        }
    };

    let total = match (weights.mi != 0.0, weights.kl != 0.0) {
        (true, true) => {
            let a = g.scale(l_mi, weights.mi);
            let b = g.scale(l_kl, weights.kl);
            g.add(a, b)?
        }
        (true, false) => g.scale(l_mi, weights.mi),
        (false, true) => g.scale(l_kl, weights.kl),
        (false, false) => g.scale(l_mi, 0.0),
    };

    let breakdown = LossBreakdown {
        l_ent: g.value(l_ent).item(),
        l_div: g.value(l_div).item(),
        l_mi: g.value(l_mi).item(),
        l_kl: g.value(l_kl).item(),
        total: g.value(total).item(),
    };
    Ok(MidlObjective {
        total,
        breakdown,
        live_passes,
        frozen_passes,
    })
}

/// Evaluates the MiDl objective on one modality-complete sample.
pub fn midl_loss(
    model: &MultimodalClassifier,
    frozen: &FrozenModel,
    sample: &MultimodalSample,
    m: Modality,
    weights: MidlWeights,
    kl_mode: KlMode,
) -> Result<LossBreakdown, LossError> {
    if !m.is_complete() {
        return Err(LossError::IncompleteModality(m));
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, &[]);
    let obj = midl_objective(&mut g, model, &vars, frozen, &[sample], None, weights, kl_mode)?;
    Ok(obj.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::{finite_difference, relative_error};
    use crate::losses::{entropy, kl_divergence, mi_loss};
    use crate::model::{Fusion, ModelConfig, ParameterSelection};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (MultimodalClassifier, ModelConfig) {
        let cfg = ModelConfig {
            audio_dim: 4,
            video_dim: 3,
            hidden_dim: 6,
            num_classes: 4,
            encoder_layers: 1,
            fusion: Fusion::Concat,
        };
        (MultimodalClassifier::new(cfg.clone(), 5).unwrap(), cfg)
    }

    fn sample(cfg: &ModelConfig, seed: u64) -> MultimodalSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultimodalSample {
            audio: (0..cfg.audio_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            video: (0..cfg.video_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            label: 0,
        }
    }

    fn perturb(model: &mut MultimodalClassifier, seed: u64, amount: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in model.select_parameters(ParameterSelection::NormLayersOnly) {
            for v in model.parameter_mut(i).value.data_mut() {
                *v += rng.gen_range(-amount..amount);
            }
        }
    }

    #[test]
    fn incomplete_sample_is_rejected() {
        let (model, cfg) = tiny();
        let frozen = model.clone_parameters();
        let s = sample(&cfg, 1);
        let err = midl_loss(&model, &frozen, &s, Modality::Audio, MidlWeights::default(), KlMode::AvOnly);
        assert!(matches!(err, Err(LossError::IncompleteModality(Modality::Audio))));
    }

    #[test]
    fn kl_vanishes_at_initialization() {
        let (model, cfg) = tiny();
        let frozen = model.clone_parameters();
        let s = sample(&cfg, 2);
        let w = MidlWeights::default();
        let b = midl_loss(&model, &frozen, &s, Modality::AudioVisual, w, KlMode::AvOnly).unwrap();
        assert_eq!(b.l_kl, 0.0);
        assert_abs_diff_eq!(b.total, w.mi * b.l_mi, epsilon = 1e-15);
        assert!(b.l_mi > 0.0);
    }

    #[test]
    fn agreeing_views_leave_only_distillation() {
        let cfg = ModelConfig {
            audio_dim: 3,
            video_dim: 3,
            hidden_dim: 4,
            num_classes: 3,
            encoder_layers: 1,
            fusion: Fusion::Concat,
        };
        let mut model = MultimodalClassifier::new(cfg.clone(), 9).unwrap();
        // zero head weights: every view collapses to softmax(head bias)
        let head = model.parameters().len() - 2;
        let shape = model.parameters()[head].value.shape().to_vec();
        model.parameter_mut(head).value = Tensor::zeros(&shape);
        let frozen = {
            let mut other = model.clone();
            let bias = other.parameters().len() - 1;
            other.parameter_mut(bias).value = Tensor::vector(vec![0.3, -0.2, 0.1]);
            other.clone_parameters()
        };
        let s = MultimodalSample {
            audio: vec![0.5, -1.0, 2.0],
            video: vec![0.5, -1.0, 2.0],
            label: 0,
        };
        let w = MidlWeights::default();
        let b = midl_loss(&model, &frozen, &s, Modality::AudioVisual, w, KlMode::AvOnly).unwrap();
        assert_abs_diff_eq!(b.l_mi, 0.0, epsilon = 1e-15);
        assert!(b.l_kl > 0.0);
        assert_abs_diff_eq!(b.total, w.kl * b.l_kl, epsilon = 1e-12);
    }

    #[test]
    fn total_matches_straight_line_recomputation() {
        let (mut model, cfg) = tiny();
        let frozen = model.clone_parameters();
        perturb(&mut model, 3, 0.3);
        let s = sample(&cfg, 4);
        let views: Vec<_> = Modality::ALL.iter().map(|&m| model.forward(&s, m).unwrap()).collect();
        let q = frozen.forward(&s, Modality::AudioVisual).unwrap();
        let w = MidlWeights { mi: 2.0, kl: 0.5 };

        let mean_h = views.iter().map(entropy).sum::<f64>() / 3.0;
        let pbar: Vec<f64> = (0..cfg.num_classes)
            .map(|k| views.iter().map(|v| v.as_slice()[k]).sum::<f64>() / 3.0)
            .collect();
        let h_bar = -pbar.iter().map(|p| p * p.ln()).sum::<f64>();
        let l_mi = h_bar - mean_h;
        let l_kl = kl_divergence(&views[2], &q);
        let b = midl_loss(&model, &frozen, &s, Modality::AudioVisual, w, KlMode::AvOnly).unwrap();
        assert_abs_diff_eq!(b.l_mi, l_mi, epsilon = 1e-13);
        assert_abs_diff_eq!(b.l_kl, l_kl, epsilon = 1e-13);
        assert_abs_diff_eq!(b.total, 2.0 * l_mi + 0.5 * l_kl, epsilon = 1e-12);
        assert_abs_diff_eq!(b.l_mi, mi_loss(&views).unwrap().l_mi, epsilon = 1e-13);

        let qs: Vec<_> = Modality::ALL.iter().map(|&m| frozen.forward(&s, m).unwrap()).collect();
        let per = views.iter().zip(&qs).map(|(p, q)| kl_divergence(p, q)).sum::<f64>() / 3.0;
        let b = midl_loss(&model, &frozen, &s, Modality::AudioVisual, w, KlMode::PerModality).unwrap();
        assert_abs_diff_eq!(b.l_kl, per, epsilon = 1e-13);
    }

    #[test]
    fn mi_term_is_view_order_invariant() {
        let (mut model, cfg) = tiny();
        perturb(&mut model, 8, 0.5);
        let s = sample(&cfg, 6);
        let views: Vec<_> = Modality::ALL.iter().map(|&m| model.forward(&s, m).unwrap()).collect();
        let base = mi_loss(&views).unwrap().l_mi;
        for order in [[1, 0, 2], [2, 1, 0], [0, 2, 1]] {
            let permuted: Vec<_> = order.iter().map(|&i| views[i].clone()).collect();
            assert_abs_diff_eq!(mi_loss(&permuted).unwrap().l_mi, base, epsilon = 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for fusion in [Fusion::Concat, Fusion::Gated] {
            let (model0, cfg) = tiny();
            let mut model = MultimodalClassifier::new(ModelConfig { fusion, ..cfg.clone() }, 5).unwrap();
            let frozen = model0.clone_parameters();
            let frozen = if fusion == Fusion::Concat { frozen } else { model.clone_parameters() };
            perturb(&mut model, 12, 0.4);
            let s = sample(&cfg, 13);
            let w = MidlWeights::default();
            let selected = model.select_parameters(ParameterSelection::AllParameters);

            let mut g = Graph::new();
            let vars = model.bind(&mut g, &selected);
            let obj = midl_objective(&mut g, &model, &vars, &frozen, &[&s], None, w, KlMode::PerModality).unwrap();
            g.backward(obj.total).unwrap();

            for &i in &selected {
                let analytic = g.grad(vars[i]);
                let numeric = finite_difference(&model.parameters()[i].value, 1e-5, |probe| {
                    let mut m = model.clone();
                    m.parameter_mut(i).value = probe.clone();
                    midl_loss(&m, &frozen, &s, Modality::AudioVisual, w, KlMode::PerModality).unwrap().total
                });
                for (a, n) in analytic.data().iter().zip(&numeric) {
                    if a.abs() > 1e-8 {
                        assert!(relative_error(*a, *n) < 1e-4, "{}: {a} vs {n}", model.parameters()[i].name);
                    }
                }
            }
        }
    }
}
