use super::*;
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::losses::{midl_loss, mi_loss};

fn setup(n_per_class: usize) -> (MultimodalClassifier, Vec<MultimodalSample>) {
    let spec = SyntheticSpec {
        num_classes: 4,
        audio_dim: 6,
        video_dim: 5,
        latent_dim: 4,
        samples_per_class: n_per_class,
        ..SyntheticSpec::default()
    };
    let split = generate_synthetic(&spec, 3).unwrap();
    let cfg = ModelConfig {
        hidden_dim: 10,
        ..spec.model_config()
    };
    (MultimodalClassifier::new(cfg, 5).unwrap(), split.train.samples)
}

use crate::model::ModelConfig;

#[test]
fn config_validation() {
    assert!(AdapterConfig::default().validate().is_ok());
    for bad in [
        AdapterConfig {
            learning_rate: 0.0,
            ..AdapterConfig::default()
        },
        AdapterConfig {
            momentum: 1.0,
            ..AdapterConfig::default()
        },
        AdapterConfig {
            batch_size: Some(0),
            ..AdapterConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(AdaptError::Config(_))), "{bad:?}");
    }
    assert_eq!(AdapterConfig::with_method(Method::Shot).effective_batch_size(), 8);
    assert_eq!(AdapterConfig::with_method(Method::Tent).effective_batch_size(), 1);
    assert_eq!(Method::parse("mi-only"), Some(Method::MiOnly));
}

#[test]
fn midl_skips_incomplete_samples() {
    let (model, samples) = setup(5);
    let mut a = Adapter::new(model.clone(), AdapterConfig::default()).unwrap();
    for m in [Modality::Audio, Modality::Video] {
        let (p, adapted) = a.on_sample(&samples[0], m).unwrap();
        assert!(!adapted);
        assert_eq!(p, model.forward(&samples[0], m).unwrap());
    }
    assert_eq!(a.model().parameters(), model.parameters());
    assert_eq!(a.steps(), 0);
}

#[test]
fn none_matches_frozen_predictions() {
    let (model, samples) = setup(5);
    let mut a = Adapter::new(model.clone(), AdapterConfig::with_method(Method::None)).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let m = Modality::ALL[i % 3];
        let (p, adapted) = a.on_sample(s, m).unwrap();
        assert!(!adapted);
        assert_eq!(p, model.forward(s, m).unwrap());
    }
    let c = a.count_compute();
    assert_eq!((c.forwards_live, c.forwards_frozen, c.backwards), (samples.len() as u64, 0, 0));
}

#[test]
fn prediction_precedes_update() {
    let (model, samples) = setup(5);
    let mut a = Adapter::new(model.clone(), AdapterConfig::default()).unwrap();
    let (p, adapted) = a.on_sample(&samples[0], Modality::AudioVisual).unwrap();
    assert!(adapted);
    assert_eq!(p, model.forward(&samples[0], Modality::AudioVisual).unwrap());
    assert_ne!(a.model().parameters(), model.parameters());
}

#[test]
fn single_step_descends_midl_objective() {
    let (model, samples) = setup(5);
    let w = MidlWeights::default();
    for s in samples.iter().take(10) {
        let mut a = Adapter::new(model.clone(), AdapterConfig::default()).unwrap();
        let before = midl_loss(a.model(), a.frozen(), s, Modality::AudioVisual, w, KlMode::AvOnly).unwrap();
        a.on_sample(s, Modality::AudioVisual).unwrap();
        let after = midl_loss(a.model(), a.frozen(), s, Modality::AudioVisual, w, KlMode::AvOnly).unwrap();
        assert!(after.total <= before.total + 1e-6, "{before:?} -> {after:?}");
    }
}

#[test]
fn dl_only_is_inert_from_initialization() {
    let (model, samples) = setup(10);
    let mut dl = Adapter::new(model.clone(), AdapterConfig::with_method(Method::DlOnly)).unwrap();
    let mut none = Adapter::new(model, AdapterConfig::with_method(Method::None)).unwrap();
    for s in &samples {
        let (p, adapted) = dl.on_sample(s, Modality::AudioVisual).unwrap();
        assert!(adapted);
        let (q, _) = none.on_sample(s, Modality::AudioVisual).unwrap();
        assert_eq!(crate::stream::argmax_label(&p), crate::stream::argmax_label(&q));
    }
    assert!(dl.max_parameter_drift() <= 1e-9, "{}", dl.max_parameter_drift());
}

#[test]
fn mi_only_agreeing_views_gives_zero_gradient() {
    let (mut model, samples) = setup(5);
    // zero head weights make every view output softmax(bias)
    let head = model.parameters().iter().position(|p| p.name == "head.weight").unwrap();
    model.parameter_mut(head).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut a = Adapter::new(
        model.clone(),
        AdapterConfig {
            params: ParameterSelection::AllParameters,
            ..AdapterConfig::with_method(Method::MiOnly)
        },
    )
    .unwrap();
    a.on_sample(&samples[0], Modality::AudioVisual).unwrap();
    assert!(a.max_parameter_drift() < 1e-15, "{}", a.max_parameter_drift());
}

#[test]
fn mi_only_repeated_steps_lower_mi() {
    let (model, samples) = setup(5);
    let batch: Vec<_> = samples.iter().take(4).map(|s| (s, Modality::AudioVisual)).collect();
    let mi = |m: &MultimodalClassifier| -> f64 {
        batch
            .iter()
            .map(|(s, _)| {
                let views: Vec<_> = Modality::ALL.iter().map(|&v| m.forward(s, v).unwrap()).collect();
                mi_loss(&views).unwrap().l_mi
            })
            .sum()
    };
    let mut a = Adapter::new(
        model,
        AdapterConfig {
            batch_size: Some(4),
            ..AdapterConfig::with_method(Method::MiOnly)
        },
    )
    .unwrap();
    let initial = mi(a.model());
    for _ in 0..50 {
        a.on_batch(&batch).unwrap();
    }
    assert!(mi(a.model()) < initial);
}

#[test]
fn compute_accounting() {
    let (model, samples) = setup(5);
    let n = 10;
    let mut a = Adapter::new(model.clone(), AdapterConfig::default()).unwrap();
    for s in samples.iter().take(n) {
        a.on_sample(s, Modality::AudioVisual).unwrap();
    }
    assert_eq!(
        a.count_compute(),
        ComputeCounters {
            forwards_live: 3 * n as u64,
            forwards_frozen: n as u64,
            backwards: n as u64
        }
    );
    let mut a = Adapter::new(model.clone(), AdapterConfig::default()).unwrap();
    for s in samples.iter().take(n) {
        a.on_sample(s, Modality::Audio).unwrap();
    }
    assert_eq!(
        a.count_compute(),
        ComputeCounters {
            forwards_live: n as u64,
            forwards_frozen: 0,
            backwards: 0
        }
    );
    let mut a = Adapter::new(
        model,
        AdapterConfig {
            kl_mode: KlMode::PerModality,
            ..AdapterConfig::default()
        },
    )
    .unwrap();
    a.on_sample(&samples[0], Modality::AudioVisual).unwrap();
    assert_eq!(a.count_compute().forwards_frozen, 3);
}

#[test]
fn norm_only_changes_exactly_norm_parameters() {
    let (model, samples) = setup(5);
    let mut a = Adapter::new(model.clone(), AdapterConfig::default()).unwrap();
    for s in samples.iter().take(20) {
        a.on_sample(s, Modality::AudioVisual).unwrap();
    }
    let expected: Vec<String> = model.parameters().iter().filter(|p| p.kind.is_norm()).map(|p| p.name.clone()).collect();
    assert_eq!(a.changed_parameters(), expected);
    let probe = &samples[0];
    assert_eq!(a.frozen().forward(probe, Modality::AudioVisual).unwrap(), model.forward(probe, Modality::AudioVisual).unwrap());
}

#[test]
fn baselines_adapt_on_unimodal_samples() {
    let (model, samples) = setup(5);
    for method in [Method::Tent, Method::Eta] {
        let mut a = Adapter::new(
            model.clone(),
            AdapterConfig {
                eta_threshold: Some(10.0),
                ..AdapterConfig::with_method(method)
            },
        )
        .unwrap();
        let (_, adapted) = a.on_sample(&samples[0], Modality::Audio).unwrap();
        assert!(adapted, "{method:?}");
        let c = a.count_compute();
        assert_eq!((c.forwards_live, c.forwards_frozen, c.backwards), (1, 0, 1));
    }
    let mut a = Adapter::new(
        model,
        AdapterConfig {
            baseline_scope: BaselineScope::CompleteOnly,
            ..AdapterConfig::with_method(Method::Tent)
        },
    )
    .unwrap();
    assert!(!a.on_sample(&samples[0], Modality::Audio).unwrap().1);
}

#[test]
fn mixed_batch_adapts_on_complete_rows_only() {
    let (model, samples) = setup(5);
    let mut a = Adapter::new(model.clone(), AdapterConfig::default()).unwrap();
    let rows = [(&samples[0], Modality::Audio), (&samples[1], Modality::AudioVisual), (&samples[2], Modality::Video)];
    let out = a.on_batch(&rows).unwrap();
    assert!(out.adapted);
    assert_eq!(out.predictions, model.forward_batch(&rows).unwrap());

    // same update as adapting on the complete row alone
    let mut b = Adapter::new(model, AdapterConfig::default()).unwrap();
    b.on_sample(&samples[1], Modality::AudioVisual).unwrap();
    for (x, y) in a.model().parameters().iter().zip(b.model().parameters()) {
        for (u, v) in x.value.data().iter().zip(y.value.data()) {
            approx::assert_abs_diff_eq!(u, v, epsilon = 1e-14);
        }
    }
}

#[test]
fn eta_filters_confident_rows_out() {
    let (model, samples) = setup(5);
    let mut a = Adapter::new(
        model,
        AdapterConfig {
            eta_threshold: Some(1e-9),
            ..AdapterConfig::with_method(Method::Eta)
        },
    )
    .unwrap();
    assert!(!a.on_sample(&samples[0], Modality::AudioVisual).unwrap().1);
    assert_eq!(a.count_compute().backwards, 0);
}
