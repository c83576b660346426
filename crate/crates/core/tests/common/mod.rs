#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcf_core::classifiers::{PatchCnn, SequenceLstm};
use vcf_core::cohort::{Label, Sex, StudyRecord, AGE_CALIPER};
use vcf_core::phantom::DemographicsModel;
use vcf_nn::{cross_entropy, grad_check, Evaluation, GradCheckReport, Mode, Probes, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Full patch CNN in `f64`, dropout active with a fixed mask, a batch of two.
pub fn cnn_gradient_report(seed: u64, per_tensor: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PatchCnn::<f64>::new(seed, 0.5);
    let x: Tensor<f64> = Tensor::from_vec(&[2, 1, 32, 32], (0..2048).map(|_| rng.random_range(0.0..1.0)).collect())
        .unwrap();
    let labels = [0usize, 1];
    let fwd = model.forward(&x, Mode::Train, 99).unwrap();
    let (_, grads) = model.backward(&fwd, &labels).unwrap();
    let mut tensors = model.params().to_vec();
    grad_check(&mut tensors, &grads, 1e-5, Probes::Sample { per_tensor, seed }, |t| {
        let m = PatchCnn::from_params(t.to_vec(), 0.5).unwrap();
        let f = m.forward(&x, Mode::Train, 99).unwrap();
        Evaluation {
            loss: cross_entropy(&f.probs, &labels).unwrap(),
            signature: f.signature(),
        }
    })
    .unwrap()
}

/// Full sequence LSTM with its softmax head, one sequence.
pub fn rnn_gradient_report(hidden: usize, seq: &[f64], label: usize, per_tensor: usize, seed: u64) -> GradCheckReport {
    let model = SequenceLstm::<f64>::new(hidden, 1.0, seed);
    let (_, grads) = model.backward(&model.forward(seq).unwrap(), label).unwrap();
    let mut tensors: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    let probes = if per_tensor == usize::MAX {
        Probes::All
    } else {
        Probes::Sample { per_tensor, seed }
    };
    grad_check(&mut tensors, &grads, 1e-5, probes, |t| {
        let mut m = SequenceLstm::<f64>::zeros(hidden);
        for (dst, src) in m.params_mut().into_iter().zip(t) {
            *dst = src.clone();
        }
        let f = m.forward(seq).unwrap();
        cross_entropy(&f.probs, &[label]).unwrap()
    })
    .unwrap()
}

pub fn record(id: &str, age: f64, sex: Sex, label: Label) -> StudyRecord {
    StudyRecord {
        study_id: id.to_string(),
        age,
        sex,
        label,
        volume_path: format!("{id}.vvol.json"),
    }
}

/// Clinical-shaped manifest: positives older and more often female.
pub fn skewed_manifest(n: usize, positive_fraction: f64, seed: u64) -> Vec<StudyRecord> {
    let model = DemographicsModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = rng.random_bool(positive_fraction);
            let (sex, age) = model.sample(positive, &mut rng);
            record(&format!("r{i:04}"), age, sex, Label::from_bool(positive))
        })
        .collect()
}

/// Exhaustive optimum over all caliper matchings: `(pairs, total gap)`,
/// maximizing pairs, then minimizing the gap. Exponential in group size.
pub fn brute_force_matching(records: &[StudyRecord]) -> (usize, f64) {
    let mut pairs = 0;
    let mut gap = 0.0;
    for sex in [Sex::F, Sex::M] {
        let ages = |label: Label| -> Vec<f64> {
            records.iter().filter(|r| r.sex == sex && r.label == label).map(|r| r.age).collect()
        };
        let (p, n) = (ages(Label::Positive), ages(Label::Negative));
        let (k, g) = search(&p, &n, 0, 0);
        pairs += k;
        gap += g;
    }
    (pairs, gap)
}

fn search(pos: &[f64], neg: &[f64], i: usize, used: u64) -> (usize, f64) {
    if i == pos.len() {
        return (0, 0.0);
    }
    let mut best = search(pos, neg, i + 1, used);
    for (j, &a) in neg.iter().enumerate() {
        let d = (pos[i] - a).abs();
        if used & (1 << j) != 0 || d > AGE_CALIPER {
            continue;
        }
        let (k, g) = search(pos, neg, i + 1, used | (1 << j));
        let cand = (k + 1, g + d);
        if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1 - 1e-9) {
            best = cand;
        }
    }
    best
}
