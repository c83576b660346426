mod common;

use common::{cnn_gradient_report, rnn_gradient_report, GRAD_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcf_core::classifiers::{
    augment_patch, cnn_checkpoint, cnn_from_checkpoint, predict_patch, predict_study, rnn_from_checkpoint,
    score_sequence, split_by_study, synthetic_sequences, train_cnn, train_rnn, CnnConfig, LabeledPatch, PatchCnn,
    ProbabilityVector, RnnConfig, SequenceLstm,
};
use vcf_core::segmentation::{Patch, PatchSequence};
use vcf_nn::{Checkpoint, Mode, Tensor};

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

/// Off-centre blob that fades to zero before the border.
fn blob(cx: f64, cy: f64) -> Vec<f32> {
    (0..1024)
        .map(|i| {
            let (r, c) = ((i / 32) as f64, (i % 32) as f64);
            (-((c - cx).powi(2) + (r - cy).powi(2)) / 18.0).exp() as f32
        })
        .collect()
}

/// Independent nearest-neighbour rotation about the patch centre.
fn rotate_nearest(p: &[f32], degrees: f64) -> Vec<f32> {
    let (s, c) = degrees.to_radians().sin_cos();
    let m = 15.5;
    (0..1024)
        .map(|i| {
            let (y, x) = ((i / 32) as f64 - m, (i % 32) as f64 - m);
            let (sx, sy) = (c * x + s * y + m, -s * x + c * y + m);
            let (sx, sy) = (sx.round(), sy.round());
            if (0.0..32.0).contains(&sx) && (0.0..32.0).contains(&sy) {
                p[sy as usize * 32 + sx as usize]
            } else {
                0.0
            }
        })
        .collect()
}

fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum();
    let va: f64 = a.iter().map(|&x| (x as f64 - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|&y| (y as f64 - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn rotation_round_trip_and_bounds() {
    let p = blob(13.0, 17.0);
    assert_eq!(augment_patch(&p, 0.0, 0.0).unwrap(), p);
    let back = augment_patch(&augment_patch(&p, 10.0, 0.0).unwrap(), -10.0, 0.0).unwrap();
    assert!(mean_abs_diff(&p, &back) <= 0.03);
    assert!(augment_patch(&p, 25.0, 0.0).is_err());
    assert!(augment_patch(&p, -18.5, 0.0).is_err());
    assert!(augment_patch(&p, 18.0, 0.0).is_ok());
    assert!(augment_patch(&p[..100], 5.0, 0.0).is_err());
}

#[test]
fn rotation_never_reflects() {
    // Asymmetric pattern: two blobs of different weight.
    let p: Vec<f32> = blob(10.0, 12.0).iter().zip(blob(20.0, 20.0)).map(|(a, b)| a + 0.5 * b).collect();
    let flipped: Vec<f32> = (0..1024).map(|i| p[(i / 32) * 32 + 31 - i % 32]).collect();
    for angle in [-18.0, -7.0, 4.0, 12.0, 18.0] {
        let aug = augment_patch(&p, angle, 0.0).unwrap();
        let with_rotated = correlation(&aug, &rotate_nearest(&p, angle));
        let with_flipped = correlation(&aug, &rotate_nearest(&flipped, angle));
        assert!(with_rotated > 0.9 && with_rotated > with_flipped, "{angle}: {with_rotated} vs {with_flipped}");
    }
}

#[test]
fn study_split_is_balanced_partition() {
    let studies: Vec<(String, bool)> = (0..100).map(|i| (format!("s{i:03}"), i % 2 == 0)).collect();
    let ids: Vec<String> = studies.iter().map(|s| s.0.clone()).collect();
    let split = split_by_study(&studies, 0.15, 4).unwrap();
    assert!(split.is_partition_of(&ids));
    assert!((14..=16).contains(&split.val.len()));
    let pos = split.val.iter().filter(|id| studies.iter().any(|(s, l)| s == *id && *l)).count();
    assert_eq!(pos * 2, split.val.len());
    assert_eq!(split_by_study(&studies, 0.15, 4).unwrap(), split);
    assert_ne!(split_by_study(&studies, 0.15, 5).unwrap(), split);
    assert!(split_by_study(&studies, 0.0, 4).is_err());
    assert!(split_by_study(&studies[..3], 0.9, 4).is_err());
}

/// Bright horizontal band (positive) against flat noise (negative).
fn toy_patches(n: usize, seed: u64) -> Vec<LabeledPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let row: usize = rng.random_range(10..22);
            let pixels = (0..1024)
                .map(|k| {
                    let base = 0.3 + rng.random_range(-0.05..0.05);
                    if label && (k as usize / 32).abs_diff(row) <= 2 {
                        0.9
                    } else {
                        base
                    }
                })
                .collect();
            LabeledPatch {
                study_id: format!("t{}", i / 8),
                pixels,
                label,
            }
        })
        .collect()
}

fn toy_config(epochs: usize) -> CnnConfig {
    CnnConfig {
        epochs,
        batch_size: 16,
        seed: 8,
        ..CnnConfig::default()
    }
}

#[test]
fn cnn_learns_separable_patches_within_three_epochs() {
    let (train, val) = (toy_patches(128, 1), toy_patches(64, 2));
    let run = train_cnn(&train, &val, &toy_config(3)).unwrap();
    assert_eq!(run.history.len(), 3);
    assert_eq!(run.history.last().unwrap().val_acc, Some(1.0), "{:?}", run.history);
}

#[test]
fn cnn_training_is_byte_deterministic_and_round_trips() {
    let train = toy_patches(48, 3);
    let a = train_cnn(&train, &[], &toy_config(1)).unwrap();
    let b = train_cnn(&train, &[], &toy_config(1)).unwrap();
    assert_eq!(a.checkpoint.weight_bytes(), b.checkpoint.weight_bytes());
    assert_eq!(a.checkpoint.descriptor_json().unwrap(), b.checkpoint.descriptor_json().unwrap());
    let dir = tempfile::tempdir().unwrap();
    a.checkpoint.save(dir.path()).unwrap();
    let loaded = cnn_from_checkpoint(&Checkpoint::load(dir.path()).unwrap()).unwrap();
    assert_eq!(predict_patch(&loaded, &train[0].pixels).unwrap(), predict_patch(&a.model, &train[0].pixels).unwrap());
    assert!(rnn_from_checkpoint(&a.checkpoint).is_err());
}

#[test]
fn cnn_rejects_single_class_data() {
    let train: Vec<LabeledPatch> = toy_patches(8, 4).into_iter().filter(|p| p.label).collect();
    assert!(train_cnn(&train, &[], &toy_config(1)).is_err());
    let bad = CnnConfig {
        max_rotation_deg: 25.0,
        ..toy_config(1)
    };
    assert!(train_cnn(&toy_patches(8, 4), &[], &bad).is_err());
}

#[test]
fn full_cnn_gradients_match_finite_differences() {
    let report = cnn_gradient_report(17, 12);
    assert!(report.probes > 100, "{report:?}");
    assert!(report.max_rel_error <= GRAD_TOLERANCE, "{report:?}");
}

#[test]
fn predictions_are_distributions_and_pure() {
    let model = PatchCnn::<f32>::new(2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let patches: Vec<Vec<f32>> = (0..10).map(|_| (0..1024).map(|_| rng.random::<f32>()).collect()).collect();
    let x = Tensor::from_vec(&[10, 1, 32, 32], patches.concat()).unwrap();
    let fwd = model.forward(&x, Mode::Eval, 0).unwrap();
    for row in fwd.probs.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-6 && row.iter().all(|&p| p > 0.0));
    }
    let seq = PatchSequence {
        study_id: "s".into(),
        patches: patches
            .iter()
            .map(|p| Patch {
                pixels: p.clone(),
                rect: None,
                label: None,
            })
            .collect(),
    };
    let v = score_sequence(&model, &seq).unwrap();
    assert_eq!(v.probs.len(), 10);
    assert_eq!(v.label, None);
    for (p, patch) in v.probs.iter().zip(&patches) {
        assert_eq!(*p, predict_patch(&model, patch).unwrap());
        assert_eq!(*p, predict_patch(&model, patch).unwrap());
    }
    let empty = PatchSequence {
        study_id: "e".into(),
        patches: vec![],
    };
    assert!(score_sequence(&model, &empty).is_err());
}

#[test]
fn full_rnn_gradients_match_finite_differences() {
    let seq = [0.1, 0.9, 0.35, 0.7, 0.02];
    let small = rnn_gradient_report(8, &seq, 1, usize::MAX, 3);
    assert!(small.max_rel_error <= GRAD_TOLERANCE, "{small:?}");
    let full = rnn_gradient_report(128, &seq, 0, 150, 4);
    assert!(full.max_rel_error <= GRAD_TOLERANCE, "{full:?}");
}

#[test]
fn zero_rnn_is_undecided_and_outputs_are_probabilities() {
    let zero = SequenceLstm::<f32>::zeros(128);
    let v = ProbabilityVector {
        study_id: "z".into(),
        label: None,
        probs: vec![0.3, 0.8],
    };
    assert_eq!(predict_study(&zero, &v).unwrap(), 0.5);
    let model = SequenceLstm::<f32>::new(128, 1.0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for len in 1..=100 {
        let v = ProbabilityVector {
            study_id: "r".into(),
            label: None,
            probs: (0..len).map(|_| rng.random::<f64>()).collect(),
        };
        let p = predict_study(&model, &v).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    let empty = ProbabilityVector {
        study_id: "e".into(),
        label: None,
        probs: vec![],
    };
    assert!(predict_study(&model, &empty).is_err());
}

fn rnn_config(epochs: usize) -> RnnConfig {
    RnnConfig {
        epochs,
        seed: 2,
        ..RnnConfig::default()
    }
}

#[test]
fn rnn_training_is_deterministic() {
    let data = synthetic_sequences(40, 3);
    let a = train_rnn(&data, &rnn_config(2)).unwrap();
    let b = train_rnn(&data, &rnn_config(2)).unwrap();
    assert_eq!(a.checkpoint.weight_bytes(), b.checkpoint.weight_bytes());
    assert_eq!(a.losses, b.losses);
}

#[test]
fn rnn_trains_on_mixed_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<ProbabilityVector> = (0..30)
        .map(|i| {
            let len = rng.random_range(3..=120);
            let probs: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
            ProbabilityVector {
                study_id: format!("m{i}"),
                label: Some(i % 2 == 0),
                probs,
            }
        })
        .collect();
    let config = RnnConfig {
        batch_size: 8,
        ..rnn_config(1)
    };
    let run = train_rnn(&data, &config).unwrap();
    assert!(run.losses[0].is_finite());
    assert!(run.model.params().iter().all(|t| t.is_finite()));
}

#[test]
fn rnn_rejects_bad_training_sets() {
    let mut data = synthetic_sequences(10, 1);
    data.iter_mut().for_each(|v| v.label = Some(true));
    assert!(train_rnn(&data, &rnn_config(1)).is_err());
    let mut data = synthetic_sequences(10, 1);
    data[0].label = None;
    assert!(train_rnn(&data, &rnn_config(1)).is_err());
}

#[test]
fn cnn_checkpoint_records_hyperparameters() {
    let model = PatchCnn::<f32>::new(1, 0.5);
    let ckpt = cnn_checkpoint(&model, &CnnConfig::default(), 15).unwrap();
    assert_eq!(ckpt.descriptor.epoch, 15);
    assert_eq!(ckpt.descriptor.hyperparameters["batch_size"], 64);
    assert_eq!(ckpt.descriptor.layers.len(), 14);
}
