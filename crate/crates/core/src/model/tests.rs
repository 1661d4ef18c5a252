use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{synth_dataset, ClassLabel, LabelScheme, MinMaxStats, Pipeline, SynthSpec, Trial};
use crate::error::Error;
use crate::nn::{Tape, Tensor};

fn small_arch() -> ArchConfig {
    ArchConfig {
        encoder_width: 6,
        embedding_width: 4,
        kernel: 3,
        classifier_width: 6,
        classifier_dilation: 2,
        reduction: 2,
    }
}

fn normalized_synth(n_subjects: usize, per: usize, seed: u64) -> Vec<Trial> {
    let d = synth_dataset(&SynthSpec {
        n_subjects,
        trials_per_subject: per,
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let p = Pipeline::standard(1.0);
    let prepared: Vec<Trial> = d.trials.iter().map(|t| p.prepare(t).unwrap()).collect();
    let refs: Vec<&Trial> = prepared.iter().collect();
    let stats = MinMaxStats::fit(&refs).unwrap();
    prepared.iter().map(|t| stats.apply(t).unwrap()).collect()
}

fn random_trial(rng: &mut ChaCha8Rng, k: u32, frames: usize, c: usize) -> Trial {
    let values = (0..frames * c).map(|_| rng.random_range(0.0..1.0)).collect();
    let names = (0..c).map(|i| format!("c{i}")).collect();
    Trial::new("R", k, 1.0, names, values).unwrap()
}

fn quick(mut cfg: TrainConfig, epochs: usize) -> TrainConfig {
    cfg.max_epochs = epochs;
    cfg
}

fn fresh_classifier(mode: Mode, seed: u64) -> ModelBundle {
    let trials = normalized_synth(2, 4, seed);
    let refs: Vec<&Trial> = trials.iter().collect();
    let (dae, _) = train_dae(&refs, &small_arch(), &quick(TrainConfig::dae(), 1)).unwrap();
    build_default_classifier(&dae, mode, LabelScheme::Binary, &small_arch(), seed).unwrap()
}

#[test]
fn zero_noise_is_identity_and_seeded_noise_repeats() {
    let v = vec![0.1, 0.5, 0.9];
    assert_eq!(add_gaussian_noise(&v, 0.0, 1).unwrap(), v);
    assert_eq!(
        add_gaussian_noise(&v, 0.3, 9).unwrap(),
        add_gaussian_noise(&v, 0.3, 9).unwrap()
    );
    assert!(add_gaussian_noise(&v, -1.0, 1).is_err());
}

#[test]
fn noise_moments_match_sigma() {
    let zeros = vec![0.0; 1_000_000];
    let d = add_gaussian_noise(&zeros, 0.001, 42).unwrap();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 5e-6, "mean {mean}");
    assert!((std / 0.001 - 1.0).abs() < 0.02, "std {std}");
}

#[test]
fn constant_signal_is_reconstructed() {
    let t = Trial::new("S", 1, 1.0, vec!["a".into(), "b".into()], vec![0.5; 20]).unwrap();
    let cfg = TrainConfig {
        max_epochs: 300,
        ..TrainConfig::dae()
    };
    let (b, h) = train_dae(&[&t], &small_arch(), &cfg).unwrap();
    let r = b.reconstruct(&t.to_tensor().unwrap()).unwrap();
    let worst = r.data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "worst deviation {worst}");
    // BCE of a 0.5 target is bounded below by ln 2
    assert!(h.best_val_loss() >= std::f64::consts::LN_2 - 1e-9);
}

#[test]
fn zero_learning_rate_stops_after_patience_plus_one() {
    let trials = normalized_synth(2, 3, 1);
    let refs: Vec<&Trial> = trials.iter().collect();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        patience: 1,
        max_epochs: 50,
        ..TrainConfig::dae()
    };
    let (b, h) = train_dae(&refs, &small_arch(), &cfg).unwrap();
    assert_eq!(h.stopped_epoch, 2);
    assert_eq!(h.best_epoch, 1);
    let init = b.arch.init_params(&[Group::Encoder, Group::Decoder], cfg.seed);
    assert_eq!(b.params, init);
}

#[test]
fn unnormalized_input_is_rejected() {
    let t = Trial::new("S", 1, 1.0, vec!["a".into()], vec![0.5, 3.0]).unwrap();
    assert!(train_dae(&[&t], &small_arch(), &TrainConfig::dae()).is_err());
}

#[test]
fn dae_training_reduces_held_out_reconstruction_error() {
    let trials = normalized_synth(4, 10, 5);
    let (train, test) = trials.split_at(32);
    let refs: Vec<&Trial> = train.iter().collect();
    let cfg = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::dae()
    };
    let untrained = {
        let (mut b, _) = train_dae(&refs, &small_arch(), &quick(cfg.clone(), 1)).unwrap();
        b.params = b.arch.init_params(&[Group::Encoder, Group::Decoder], cfg.seed);
        b
    };
    let (trained, _) = train_dae(&refs, &small_arch(), &cfg).unwrap();
    let mse = |b: &ModelBundle| {
        let mut s = 0.0;
        let mut n = 0.0;
        for t in test {
            let x = t.to_tensor().unwrap();
            let r = b.reconstruct(&x).unwrap();
            s += x.data().iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += x.len() as f64;
        }
        s / n
    };
    let (before, after) = (mse(&untrained), mse(&trained));
    assert!(after < 0.1 * before, "before {before}, after {after}");
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let trials = normalized_synth(3, 6, 8);
    let refs: Vec<&Trial> = trials.iter().collect();
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 2,
        learning_rate: 0.02,
        ..TrainConfig::dae()
    };
    let (b, h) = train_dae(&refs, &small_arch(), &cfg).unwrap();
    assert!(h.stopped_epoch <= cfg.max_epochs);
    assert!(h.stopped_epoch - h.best_epoch <= cfg.patience);
    let min = h.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(h.best_val_loss(), min);
    let val: Vec<&Trial> = trials
        .iter()
        .filter(|t| h.validation_trials.contains(&t.id().0))
        .collect();
    let again = reconstruction_loss(&b, &val, &cfg).unwrap();
    assert!((again - h.best_val_loss()).abs() < 1e-12, "{again} vs {}", h.best_val_loss());
}

#[test]
fn classifier_head_is_a_probability_vector_for_any_length() {
    let b = fresh_classifier(Mode::Classification, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for frames in [40, 160] {
        let t = random_trial(&mut rng, 1, frames, 4);
        let out = b.forward(&t.to_tensor().unwrap()).unwrap().output;
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn head_must_match_mode() {
    let trials = normalized_synth(1, 3, 2);
    let refs: Vec<&Trial> = trials.iter().collect();
    let (dae, _) = train_dae(&refs, &small_arch(), &quick(TrainConfig::dae(), 1)).unwrap();
    let softmax_head = small_arch().classifier(Mode::Classification, 2);
    let err = build_classifier(&dae, Mode::Regression, LabelScheme::Binary, softmax_head, 0);
    assert!(matches!(err, Err(Error::Layer(_))));
}

#[test]
fn supervised_training_leaves_the_encoder_untouched() {
    let trials = normalized_synth(2, 6, 4);
    let refs: Vec<&Trial> = trials.iter().collect();
    let b = fresh_classifier(Mode::Classification, 4);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        ..quick(TrainConfig::supervised(Mode::Classification), 3)
    };
    let (trained, _) = train_supervised(&b, &refs, &cfg).unwrap();
    for (name, t) in b.params.iter() {
        let after = trained.params.get(name).unwrap();
        if name.starts_with("enc.") || name.starts_with("dec.") {
            assert_eq!(after, t, "{name} moved");
        }
    }
    assert!(b.params.with_prefix("cls.").any(|(n, t)| trained.params.get(n).unwrap() != t));
}

fn level_trial(k: u32, high: bool, rng: &mut ChaCha8Rng) -> Trial {
    let frames = rng.random_range(12..20);
    let level = if high { 0.75 } else { 0.25 };
    let values = (0..frames * 2)
        .map(|_| (level + rng.random_range(-0.1..0.1)) as f64)
        .collect();
    Trial::new("T", k, 1.0, vec!["a".into(), "b".into()], values)
        .unwrap()
        .with_labels(None, Some(if high { ClassLabel::Fail } else { ClassLabel::Pass }))
}

#[test]
fn separable_toy_classes_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials: Vec<Trial> = (0..40).map(|i| level_trial(i + 1, i % 2 == 0, &mut rng)).collect();
    let (train, test) = trials.split_at(30);
    let refs: Vec<&Trial> = train.iter().collect();
    let (dae, _) = train_dae(&refs, &small_arch(), &quick(TrainConfig::dae(), 5)).unwrap();
    let b = build_default_classifier(&dae, Mode::Classification, LabelScheme::Binary, &small_arch(), 1)
        .unwrap();
    let cfg = TrainConfig::supervised(Mode::Classification);
    let (trained, h) = train_supervised(&b, &refs, &cfg).unwrap();
    assert!(h.stopped_epoch <= 200);
    let correct = test
        .iter()
        .filter(|t| predict(&trained, t).unwrap().is_correct() == Some(true))
        .count();
    assert_eq!(correct, test.len());
}

#[test]
fn paper_counts_give_the_expected_weight_ratio() {
    let mut labels = vec![ClassLabel::Pass; 1842];
    labels.extend(vec![ClassLabel::Fail; 213]);
    let w = balanced_class_weights(&labels, LabelScheme::Binary);
    let ratio = w[&ClassLabel::Fail] / w[&ClassLabel::Pass];
    assert!((ratio - 1842.0 / 213.0).abs() < 1e-12);
    assert!((ratio - 8.65).abs() < 0.005);

    // mirrored predictions give equal raw losses; weights scale them
    let mut tape = Tape::new();
    let p_pass = tape.constant(Tensor::vector(vec![0.7, 0.3]));
    let p_fail = tape.constant(Tensor::vector(vec![0.3, 0.7]));
    let lp = tape
        .cosine(p_pass, &Tensor::vector(vec![1.0, 0.0]), w[&ClassLabel::Pass])
        .unwrap();
    let lf = tape
        .cosine(p_fail, &Tensor::vector(vec![0.0, 1.0]), w[&ClassLabel::Fail])
        .unwrap();
    let (lp, lf) = (tape.value(lp).item(), tape.value(lf).item());
    assert!((lf / lp - ratio).abs() < 1e-12);
}

#[test]
fn class_weighted_batch_loss_is_linear() {
    let weights = [0.4, 2.5, 1.0];
    let preds = [[0.6, 0.4], [0.2, 0.8], [0.55, 0.45]];
    let targets = [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
    let mut tape = Tape::new();
    let mut per = Vec::new();
    let mut total = None;
    for i in 0..3 {
        let p = tape.constant(Tensor::vector(preds[i].to_vec()));
        let unit = tape.cosine(p, &Tensor::vector(targets[i].to_vec()), 1.0).unwrap();
        per.push(tape.value(unit).item());
        let l = tape.cosine(p, &Tensor::vector(targets[i].to_vec()), weights[i]).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l).unwrap(),
        });
    }
    let total = tape.value(total.unwrap()).item();
    let expected: f64 = per.iter().zip(weights).map(|(l, w)| l * w).sum();
    assert!((total - expected).abs() < 1e-12);
}

#[test]
fn realizable_regression_targets_are_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let b = fresh_classifier(Mode::Regression, 6);
    let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trials: Vec<Trial> = (0..30)
        .map(|k| {
            let t = random_trial(&mut rng, k + 1, 16, 4);
            let pre = b.forward(&t.to_tensor().unwrap()).unwrap().pre_gap;
            let gap: Vec<f64> = (0..6)
                .map(|c| (0..16).map(|i| pre.data()[i * 6 + c]).sum::<f64>() / 16.0)
                .collect();
            let s = 100.0 + 10.0 * gap.iter().zip(&a).map(|(g, w)| g * w).sum::<f64>();
            t.with_labels(Some(s), None)
        })
        .collect();
    let refs: Vec<&Trial> = trials.iter().collect();
    let cfg = TrainConfig {
        learning_rate: 0.003,
        l2: 0.0,
        max_epochs: 300,
        patience: 300,
        ..TrainConfig::supervised(Mode::Regression)
    };
    let (_, h) = train_supervised(&b, &refs, &cfg).unwrap();
    let best_train = h.train_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best_train < 1e-3, "train loss {best_train}");
}

#[test]
fn label_mode_mismatch_is_rejected() {
    let b = fresh_classifier(Mode::Regression, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random_trial(&mut rng, 1, 8, 4).with_labels(None, Some(ClassLabel::Pass));
    let err = train_supervised(&b, &[&t], &TrainConfig::supervised(Mode::Regression));
    assert!(err.is_err());
}

#[test]
fn zeroed_head_gives_even_confidences() {
    let mut b = fresh_classifier(Mode::Classification, 5);
    let names: Vec<String> = b.params.with_prefix("cls.head").map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = b.params.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_trial(&mut rng, 1, 10, 4);
    let r = predict(&b, &t).unwrap();
    assert_eq!(r.confidences, vec![0.5, 0.5]);
    assert_eq!(r.predicted, Some(0));
}

#[test]
fn predictions_are_deterministic_and_check_channels() {
    let b = fresh_classifier(Mode::Classification, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_trial(&mut rng, 1, 12, 4);
    assert_eq!(predict(&b, &t).unwrap(), predict(&b, &t.clone()).unwrap());
    let wrong = random_trial(&mut rng, 2, 12, 3);
    assert!(matches!(predict(&b, &wrong), Err(Error::Shape { .. })));
}

#[test]
fn regression_predictions_are_in_score_units() {
    let mut b = fresh_classifier(Mode::Regression, 9);
    let z = crate::data::ZNorm { mean: 200.0, std: 15.0 };
    b.scores = Some(z);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_trial(&mut rng, 1, 12, 4);
    let raw = b.forward(&t.to_tensor().unwrap()).unwrap().output[0];
    let r = predict(&b, &t).unwrap();
    assert!((r.predicted_score.unwrap() - z.invert(raw)).abs() < 1e-9);
    assert!((z.invert(z.apply(212.5)) - 212.5).abs() < 1e-9);
}

#[test]
fn bundle_roundtrip_is_bit_exact() {
    let trials = normalized_synth(2, 6, 10);
    let refs: Vec<&Trial> = trials.iter().collect();
    let b = fresh_classifier(Mode::Classification, 10);
    let (mut trained, _) =
        train_supervised(&b, &refs, &quick(TrainConfig::supervised(Mode::Classification), 2)).unwrap();
    trained.minmax = Some(MinMaxStats::fit(&refs).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sksq");
    save_bundle(&trained, &path).unwrap();
    let loaded = load_bundle(&path).unwrap();
    assert_eq!(loaded.params, trained.params);
    assert_eq!(loaded.arch, trained.arch);
    assert_eq!(loaded.trainable, trained.trainable);
    assert_eq!(loaded.minmax.as_ref().map(|m| (&m.min, &m.max)), trained.minmax.as_ref().map(|m| (&m.min, &m.max)));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..100 {
        let frames = rng.random_range(4..40);
        let t = random_trial(&mut rng, k + 1, frames, 4);
        let a = predict(&trained, &t).unwrap();
        let b = predict(&loaded, &t).unwrap();
        let bits = |r: &crate::record::PredictionRecord| r.confidences.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn corrupted_bundles_fail_with_distinct_errors() {
    let b = fresh_classifier(Mode::Classification, 12);
    let bytes = bundle_to_bytes(&b).unwrap();
    assert!(bundle_from_bytes(&bytes).is_ok());

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(bundle_from_bytes(&flipped), Err(Error::BundleChecksum)));

    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&7u32.to_le_bytes());
    let err = bundle_from_bytes(&future).unwrap_err();
    assert!(matches!(err, Error::BundleVersion { found: 7, expected: FORMAT_VERSION }));
    let msg = err.to_string();
    assert!(msg.contains('7') && msg.contains(&FORMAT_VERSION.to_string()), "{msg}");

    let short = &bytes[..bytes.len() - 100];
    assert!(matches!(bundle_from_bytes(short), Err(Error::BundleTruncated { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_accepts_any_length(frames in 4usize..1000, seed in 0u64..1000) {
        let b = fresh_classifier(Mode::Classification, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_trial(&mut rng, 1, frames, 4);
        let out = b.forward(&t.to_tensor().unwrap()).unwrap();
        prop_assert_eq!(out.output.len(), 2);
        prop_assert_eq!(out.pre_gap.shape()[0], frames);
        prop_assert!((out.output.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
