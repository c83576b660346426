//! The patch CNN, the probability-sequence LSTM and their training support:
//! rotation augmentation and study-level splitting.

mod augment;
mod cnn;
mod rnn;
mod split;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vcf_nn::NnError;

pub use augment::{augment_patch, MAX_ROTATION_DEG};
pub use cnn::{
    cnn_checkpoint, cnn_from_checkpoint, history_csv, patch_accuracy, predict_patch, score_sequence, train_cnn,
    CnnConfig, CnnForward, CnnTraining, EpochRecord, LabeledPatch, PatchCnn, CNN_ARCHITECTURE,
};
pub use rnn::{
    predict_study, rnn_checkpoint, rnn_from_checkpoint, train_rnn, RnnConfig, RnnForward, RnnTraining, SequenceLstm,
    RNN_ARCHITECTURE, RNN_HIDDEN,
};
pub use split::{split_by_study, Split};

use crate::io::write_atomic;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("study {0}: empty sequence")]
    EmptySequence(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
}

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &s in stream {
        h = h.wrapping_add(s.wrapping_add(0x9e37_79b9_7f4a_7c15));
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// FNV-1a over a sequence of indices.
pub fn fingerprint(values: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in values {
        for b in (v as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Per-patch fracture probabilities of one study, cranial to caudal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector {
    pub study_id: String,
    pub label: Option<bool>,
    pub probs: Vec<f64>,
}

pub const VECTORS_HEADER: &str = "study_id,label,probabilities";

/// One line per study: `study_id,label,p1;p2;...` with label `1`, `0` or empty.
pub fn vectors_to_csv(vectors: &[ProbabilityVector]) -> String {
    let mut s = format!("{VECTORS_HEADER}\n");
    for v in vectors {
        let label = match v.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        let probs: Vec<String> = v.probs.iter().map(|p| p.to_string()).collect();
        s.push_str(&format!("{},{},{}\n", v.study_id, label, probs.join(";")));
    }
    s
}

pub fn vectors_from_csv(text: &str) -> Result<Vec<ProbabilityVector>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(VECTORS_HEADER) {
        return Err(format!("missing header {VECTORS_HEADER:?}"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 || fields[0].is_empty() {
            return Err(format!("line {}: expected 3 fields", n + 2));
        }
        let label = match fields[1] {
            "1" => Some(true),
            "0" => Some(false),
            "" => None,
            other => return Err(format!("line {}: label {other:?}", n + 2)),
        };
        let probs = fields[2]
            .split(';')
            .map(|p| p.parse::<f64>().ok().filter(|v| (0.0..=1.0).contains(v)))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| format!("line {}: probabilities must be numbers in [0, 1]", n + 2))?;
        out.push(ProbabilityVector {
            study_id: fields[0].to_string(),
            label,
            probs,
        });
    }
    Ok(out)
}

pub fn write_vectors(path: &Path, vectors: &[ProbabilityVector]) -> Result<(), ClassifierError> {
    write_atomic(path, vectors_to_csv(vectors).as_bytes()).map_err(|e| ClassifierError::File {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_vectors(path: &Path) -> Result<Vec<ProbabilityVector>, ClassifierError> {
    let file_err = |reason: String| ClassifierError::File {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    vectors_from_csv(&text).map_err(file_err)
}

/// The "any probability above 0.5" task: background values in `[0, 0.45]`,
/// positives carry 1 to 3 spikes in `[0.55, 1]`. Lengths `10..=40`.
pub fn synthetic_sequences(n: usize, seed: u64) -> Vec<ProbabilityVector> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(10..=40);
            let positive = rng.random_bool(0.5);
            let mut probs: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..=0.45)).collect();
            if positive {
                let spikes = rng.random_range(1..=3);
                for at in rand::seq::index::sample(&mut rng, len, spikes) {
                    probs[at] = rng.random_range(0.55..=1.0);
                }
            }
            ProbabilityVector {
                study_id: format!("seq-{i:04}"),
                label: Some(positive),
                probs,
            }
        })
        .collect()
}
