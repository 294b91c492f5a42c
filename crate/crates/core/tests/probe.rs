mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;
use typoprobe::corpus::LanguageId;
use typoprobe::embedding::{Dtype, EmbeddingHeader, EmbeddingMatrix};
use typoprobe::probe::*;
use typoprobe::rng;
use typoprobe::Error;

fn gaussian(seed: u64, rows: usize, dim: usize) -> Array2<f64> {
    let mut r = rng::stream(seed, "test-data");
    Array2::from_shape_simple_fn((rows, dim), || r.gen_range(-1.0..1.0))
}

/// Three pairs, each pair's languages sharing one of three values.
fn three_value_world() -> common::World {
    common::world(&common::recipe_from(json!({
        "tag": "three",
        "dim": 16,
        "seed": 5,
        "noise_sigma": 0.25,
        "sentences_per_language": 1000,
        "offset_norm": 0.5,
        "dtype": "f64",
        "pairs": [["de", "nl"], ["ja", "ko"], ["ar", "he"]],
        "features": [{
            "code": "900A", "labels": ["a", "b", "c"], "scale": 5.0,
            "values": { "de": "a", "nl": "a", "ja": "b", "ko": "b", "ar": "c", "he": "c" }
        }]
    })))
}

fn lang(code: &str) -> LanguageId {
    LanguageId::new(code).unwrap()
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = init_probe(768, 3, 7).unwrap();
    assert_eq!(a, init_probe(768, 3, 7).unwrap());
    assert_ne!(a, init_probe(768, 3, 8).unwrap());
    assert!(a.b1.iter().chain(&a.b2).all(|&b| b == 0.0));
    assert_eq!((a.w1.nrows(), a.w1.ncols(), a.w2.nrows()), (HIDDEN_UNITS, 768, 3));
}

#[test]
fn init_is_centred_and_bounded() {
    let mut sum = 0.0;
    let mut n = 0.0;
    for seed in 0..10 {
        let p = init_probe(768, 3, seed).unwrap();
        let limit = (6.0 / (768.0 + HIDDEN_UNITS as f64)).sqrt();
        assert!(p.w1.iter().all(|w| w.abs() <= limit));
        sum += p.w1.sum();
        n += p.w1.len() as f64;
    }
    assert!((sum / n).abs() < 0.01);
}

#[test]
fn init_rejects_degenerate_shapes() {
    assert!(init_probe(0, 3, 1).is_err());
    assert!(init_probe(4, 1, 1).is_err());
}

#[test]
fn forward_checks_dimension() {
    let p = init_probe(4, 3, 1).unwrap();
    assert!(matches!(forward(&p, &[0.0; 3]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn separable_clusters_are_learned() {
    let w = three_value_world();
    let f = &w.spec.feature("900A").unwrap().feature;
    let train: Vec<_> = ["de", "ja", "ar"]
        .iter()
        .enumerate()
        .map(|(i, l)| (w.store.get(&lang(l)).unwrap(), i))
        .collect();
    let probe = train_probe(f, &train, &TrainConfig::default()).unwrap();
    assert!(probe.train_log.last().unwrap().train_accuracy >= 0.99);
    for (i, l) in ["nl", "ko", "he"].iter().enumerate() {
        let acc = evaluate_accuracy(&probe, w.store.get(&lang(l)).unwrap(), i).unwrap();
        assert!(acc >= 0.99, "{l}: {acc}");
    }
}

#[test]
fn shuffled_labels_leave_chance() {
    let x = gaussian(11, 3000, 64);
    let mut labels: Vec<usize> = (0..3000).map(|i| i % 3).collect();
    labels.shuffle(&mut rng::stream(11, "test-labels"));
    let out = fit(x.view(), &labels, 3, &TrainConfig::default()).unwrap();
    let val = out.log.last().unwrap().val_accuracy.unwrap();
    assert!((val - 1.0 / 3.0).abs() <= 0.1, "{val}");
}

#[test]
fn training_is_deterministic() {
    let x = gaussian(2, 300, 8);
    let labels: Vec<usize> = (0..300).map(|i| usize::from(x[[i, 0]] > 0.0)).collect();
    let config = TrainConfig { seed: 9, ..TrainConfig::default() };
    let a = fit(x.view(), &labels, 2, &config).unwrap();
    let b = fit(x.view(), &labels, 2, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
}

#[test]
fn single_class_and_bad_labels_are_rejected() {
    let x = gaussian(2, 10, 4);
    assert!(fit(x.view(), &[0; 10], 2, &TrainConfig::default()).is_err());
    assert!(fit(x.view(), &[0, 1, 2, 0, 1, 0, 1, 0, 1, 0], 2, &TrainConfig::default()).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { max_epochs: 0, ..TrainConfig::default() },
        TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(serde_json::from_value::<TrainConfig>(json!({ "momentum": 0.9 })).is_err());
    let sgd: TrainConfig = serde_json::from_value(json!({ "optimizer": "sgd" })).unwrap();
    assert_eq!(sgd.optimizer, OptimizerKind::Sgd);
}

#[test]
fn sgd_full_batch_loss_never_rises() {
    let x = gaussian(4, 64, 6);
    let labels: Vec<usize> = (0..64).map(|i| usize::from(x[[i, 1]] + x[[i, 2]] > 0.0)).collect();
    let config = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.05,
        batch_size: 64,
        max_epochs: 30,
        early_stop_patience: 0,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let out = fit(x.view(), &labels, 2, &config).unwrap();
    for w in out.log.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss + 1e-12, "{} -> {}", w[0].train_loss, w[1].train_loss);
    }
}

#[test]
fn zero_probe_predicts_class_zero() {
    let probe = TrainedProbe {
        feature: "900A".into(),
        labels: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        params: ProbeParams::zeros(3, HIDDEN_UNITS, 4),
        config: TrainConfig::default(),
        train_log: vec![],
        best_epoch: 0,
        class_counts: vec![1; 4],
    };
    let m = EmbeddingMatrix::new(
        EmbeddingHeader::new(lang("es"), "t", 12, 3, 2, Dtype::F64),
        vec![1.0, -2.0, 3.0, 0.0, 0.5, 9.0],
    )
    .unwrap();
    assert_eq!(predict(&probe, &m).unwrap(), vec![0, 0]);
    assert_eq!(evaluate_accuracy(&probe, &m, 0).unwrap(), 1.0);
    assert_eq!(evaluate_accuracy(&probe, &m, 2).unwrap(), 0.0);
    let wrong = EmbeddingMatrix::new(EmbeddingHeader::new(lang("es"), "t", 12, 2, 1, Dtype::F64), vec![0.0; 2]).unwrap();
    assert!(predict(&probe, &wrong).is_err());
}

#[test]
fn random_probes_sit_at_chance_on_symmetric_data() {
    let w = three_value_world();
    let mut total = 0.0;
    let mut n = 0.0;
    for seed in 0..40 {
        let probe = TrainedProbe {
            feature: "900A".into(),
            labels: vec!["a".into(), "b".into(), "c".into()],
            params: init_probe(16, 3, seed).unwrap(),
            config: TrainConfig::default(),
            train_log: vec![],
            best_epoch: 0,
            class_counts: vec![1; 3],
        };
        for (i, l) in ["nl", "ko", "he"].iter().enumerate() {
            total += evaluate_accuracy(&probe, w.store.get(&lang(l)).unwrap(), i).unwrap();
            n += 1.0;
        }
    }
    let mean = total / n;
    assert!((mean - 1.0 / 3.0).abs() <= 0.05, "{mean}");
}

#[test]
fn saved_probe_predicts_identically() {
    let w = three_value_world();
    let f = &w.spec.feature("900A").unwrap().feature;
    let train: Vec<_> = ["de", "ja", "ar"]
        .iter()
        .enumerate()
        .map(|(i, l)| (w.store.get(&lang(l)).unwrap(), i))
        .collect();
    let config = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let probe = train_probe(f, &train, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    probe.save(dir.path()).unwrap();
    let back = TrainedProbe::load(dir.path()).unwrap();
    assert_eq!(back, probe);
    let m = w.store.get(&lang("ko")).unwrap();
    assert_eq!(predict(&back, m).unwrap(), predict(&probe, m).unwrap());
}

fn arb_case() -> impl Strategy<Value = (ProbeParams, Vec<f64>)> {
    (1usize..12, 2usize..6, any::<u64>()).prop_flat_map(|(dim, k, seed)| {
        let mut p = init_probe(dim, k, seed).unwrap();
        let mut r = rng::stream(seed, "test-bias");
        p.b1.iter_mut().for_each(|b| *b = r.gen_range(-1.0..1.0));
        p.b2.iter_mut().for_each(|b| *b = r.gen_range(-50.0..50.0));
        (Just(p), proptest::collection::vec(-1e3f64..1e3, dim))
    })
}

proptest! {
    #[test]
    fn forward_is_a_distribution((p, x) in arb_case()) {
        let probs = forward(&p, &x).unwrap();
        prop_assert!(probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn argmax_ignores_common_logit_shift((p, x) in arb_case(), c in -1e3f64..1e3) {
        let mut shifted = p.clone();
        shifted.b2.iter_mut().for_each(|b| *b += c);
        let a = forward(&p, &x).unwrap();
        let b = forward(&shifted, &x).unwrap();
        let arg = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, &q)| if q > v[best] { i } else { best });
        prop_assert_eq!(arg(&a), arg(&b));
    }

    #[test]
    fn manual_gradients_match_finite_differences(dim in 2usize..12, k in 2usize..5, seed in any::<u64>()) {
        let p = init_probe(dim, k, seed).unwrap();
        let x = gaussian(seed ^ 1, 6, dim);
        let labels: Vec<usize> = (0..6).map(|i| i % k).collect();
        prop_assert!(gradient_check(&p, x.view(), &labels) < 1e-4);
    }
}
