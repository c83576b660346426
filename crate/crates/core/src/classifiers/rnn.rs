use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vcf_nn::{
    cross_entropy, dense, dense_backward, init, lstm_backward, lstm_sequence, softmax, softmax_cross_entropy_backward,
    Checkpoint, LayerEntry, LstmParams, LstmTrace, ModelDescriptor, Scalar, Sgd, Tensor,
};

use super::{derive_seed, ClassifierError, ProbabilityVector};

pub const RNN_ARCHITECTURE: &str = "vcf-sequence-lstm";
pub const RNN_HIDDEN: usize = 128;
const PARAM_NAMES: [&str; 5] = ["lstm.w_ih", "lstm.w_hh", "lstm.bias", "head.weight", "head.bias"];

#[derive(Clone, Debug, PartialEq)]
pub struct RnnConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Sequences per gradient step.
    pub batch_size: usize,
    /// Global gradient-norm bound applied before each step.
    pub clip_norm: f64,
    /// Initial forget-gate bias.
    pub forget_bias: f64,
    pub seed: u64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            hidden: RNN_HIDDEN,
            epochs: 30,
            lr: 0.005,
            momentum: 0.9,
            batch_size: 1,
            clip_norm: 5.0,
            forget_bias: 1.0,
            seed: 0,
        }
    }
}

/// LSTM over per-patch probabilities, final hidden state into a 2-way softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLstm<T> {
    pub lstm: LstmParams<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

pub struct RnnForward<T> {
    trace: LstmTrace<T>,
    hidden: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Scalar> SequenceLstm<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            lstm: LstmParams::zeros(1, hidden),
            head_w: Tensor::zeros(&[2, hidden]),
            head_b: Tensor::zeros(&[2]),
        }
    }

    /// Uniform `±1/√H` everywhere, `forget_bias` added to the forget gate.
    pub fn new(hidden: usize, forget_bias: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias: Tensor<T> = init::uniform(&[4 * hidden], bound, &mut rng);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = *v + T::from_f64_lossy(forget_bias);
        }
        Self {
            lstm: LstmParams {
                w_ih: init::uniform(&[4 * hidden, 1], bound, &mut rng),
                w_hh: init::uniform(&[4 * hidden, hidden], bound, &mut rng),
                bias,
            },
            head_w: init::uniform(&[2, hidden], bound, &mut rng),
            head_b: Tensor::zeros(&[2]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn params(&self) -> [&Tensor<T>; 5] {
        [&self.lstm.w_ih, &self.lstm.w_hh, &self.lstm.bias, &self.head_w, &self.head_b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 5] {
        [
            &mut self.lstm.w_ih,
            &mut self.lstm.w_hh,
            &mut self.lstm.bias,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> SequenceLstm<U> {
        SequenceLstm {
            lstm: LstmParams {
                w_ih: self.lstm.w_ih.cast(),
                w_hh: self.lstm.w_hh.cast(),
                bias: self.lstm.bias.cast(),
            },
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Probabilities are centred to `2p - 1` before entering the recurrence.
    pub fn forward(&self, seq: &[T]) -> Result<RnnForward<T>, ClassifierError> {
        let centred: Vec<T> = seq.iter().map(|&p| p + p - T::one()).collect();
        let trace = lstm_sequence(&centred, &self.lstm)?;
        let hidden = Tensor::from_vec(&[1, self.hidden()], trace.final_hidden().to_vec())?;
        let probs = softmax(&dense(&hidden, &self.head_w, &self.head_b)?)?;
        Ok(RnnForward { trace, hidden, probs })
    }

    /// Cross-entropy of one sequence and gradients in [`Self::params`] order.
    pub fn backward(&self, fwd: &RnnForward<T>, label: usize) -> Result<(T, Vec<Tensor<T>>), ClassifierError> {
        let loss = cross_entropy(&fwd.probs, &[label])?;
        let g = softmax_cross_entropy_backward(&fwd.probs, &[label])?;
        let head = dense_backward(&fwd.hidden, &self.head_w, &g)?;
        let lg = lstm_backward(&fwd.trace, &self.lstm, head.input.data())?;
        Ok((loss, vec![lg.w_ih, lg.w_hh, lg.bias, head.weight, head.bias]))
    }

    pub fn predict(&self, seq: &[T]) -> Result<f64, ClassifierError> {
        Ok(self.forward(seq)?.probs.data()[1].to_f64_lossy())
    }
}

/// Probability that the study holds a fracture.
pub fn predict_study(model: &SequenceLstm<f32>, v: &ProbabilityVector) -> Result<f64, ClassifierError> {
    if v.probs.is_empty() {
        return Err(ClassifierError::EmptySequence(v.study_id.clone()));
    }
    let seq: Vec<f32> = v.probs.iter().map(|&p| p as f32).collect();
    model.predict(&seq)
}

pub struct RnnTraining {
    pub model: SequenceLstm<f32>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub checkpoint: Checkpoint,
}

fn clip(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
}

/// SGD over whole variable-length sequences (full BPTT), seeded shuffling.
pub fn train_rnn(vectors: &[ProbabilityVector], config: &RnnConfig) -> Result<RnnTraining, ClassifierError> {
    if config.epochs == 0 || config.batch_size == 0 || config.hidden == 0 {
        return Err(ClassifierError::Argument("epochs, batch size and hidden size must be positive".into()));
    }
    let mut data = Vec::with_capacity(vectors.len());
    for v in vectors {
        let label = v
            .label
            .ok_or_else(|| ClassifierError::Data(format!("study {} has no label", v.study_id)))?;
        if v.probs.is_empty() {
            return Err(ClassifierError::EmptySequence(v.study_id.clone()));
        }
        data.push((v.probs.iter().map(|&p| p as f32).collect::<Vec<f32>>(), label as usize));
    }
    let pos = data.iter().filter(|d| d.1 == 1).count();
    if pos < 2 || data.len() - pos < 2 {
        return Err(ClassifierError::Data(format!(
            "need >= 2 studies per class, got {pos} positive and {} negative",
            data.len() - pos
        )));
    }
    let mut model = SequenceLstm::<f32>::new(config.hidden, config.forget_bias, derive_seed(config.seed, &[0]));
    let mut sgd = Sgd::<f32>::new(config.lr, config.momentum)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut total: Option<Vec<Tensor<f32>>> = None;
            for &i in batch {
                let fwd = model.forward(&data[i].0)?;
                let (loss, grads) = model.backward(&fwd, data[i].1)?;
                loss_sum += loss as f64;
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(t) => {
                        for (a, g) in t.iter_mut().zip(&grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.scale(inv));
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(ClassifierError::Diverged { epoch });
            }
            clip(&mut grads, config.clip_norm);
            sgd.step(&mut model.params_mut(), &grads)?;
        }
        let mean = loss_sum / data.len() as f64;
        log::info!("rnn epoch {epoch}: train loss {mean:.4}");
        losses.push(mean);
    }
    let checkpoint = rnn_checkpoint(&model, config, config.epochs)?;
    Ok(RnnTraining {
        model,
        losses,
        checkpoint,
    })
}

pub fn rnn_checkpoint(model: &SequenceLstm<f32>, config: &RnnConfig, epoch: usize) -> Result<Checkpoint, ClassifierError> {
    let layers = PARAM_NAMES
        .iter()
        .zip(model.params())
        .map(|(name, t)| LayerEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let mut hyperparameters = BTreeMap::new();
    hyperparameters.insert("hidden".into(), json!(model.hidden()));
    hyperparameters.insert("lr".into(), json!(config.lr));
    hyperparameters.insert("momentum".into(), json!(config.momentum));
    hyperparameters.insert("batch_size".into(), json!(config.batch_size));
    hyperparameters.insert("clip_norm".into(), json!(config.clip_norm));
    hyperparameters.insert("forget_bias".into(), json!(config.forget_bias));
    hyperparameters.insert("epochs".into(), json!(config.epochs));
    let descriptor = ModelDescriptor {
        version: vcf_nn::checkpoint::CHECKPOINT_VERSION,
        architecture: RNN_ARCHITECTURE.into(),
        layers,
        seed: config.seed,
        epoch,
        hyperparameters,
    };
    Ok(Checkpoint::new(descriptor, model.params().into_iter().cloned().collect())?)
}

pub fn rnn_from_checkpoint(ckpt: &Checkpoint) -> Result<SequenceLstm<f32>, ClassifierError> {
    if ckpt.descriptor.architecture != RNN_ARCHITECTURE {
        return Err(ClassifierError::Checkpoint(format!(
            "architecture {:?} is not {RNN_ARCHITECTURE}",
            ckpt.descriptor.architecture
        )));
    }
    let names: Vec<&str> = ckpt.descriptor.layers.iter().map(|l| l.name.as_str()).collect();
    if names != PARAM_NAMES || ckpt.tensors.len() != 5 {
        return Err(ClassifierError::Checkpoint("layer list does not match the LSTM".into()));
    }
    let h = ckpt.tensors[1].shape()[1];
    let expect: [&[usize]; 5] = [&[4 * h, 1], &[4 * h, h], &[4 * h], &[2, h], &[2]];
    if ckpt.tensors.iter().zip(expect).any(|(t, s)| t.shape() != s) {
        return Err(ClassifierError::Checkpoint("LSTM tensor shapes are inconsistent".into()));
    }
    let t = &ckpt.tensors;
    Ok(SequenceLstm {
        lstm: LstmParams {
            w_ih: t[0].clone(),
            w_hh: t[1].clone(),
            bias: t[2].clone(),
        },
        head_w: t[3].clone(),
        head_b: t[4].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(probs: Vec<f64>) -> ProbabilityVector {
        ProbabilityVector {
            study_id: "s".into(),
            label: None,
            probs,
        }
    }

    #[test]
    fn zero_model_outputs_half() {
        let m = SequenceLstm::<f32>::zeros(128);
        assert_eq!(predict_study(&m, &vector(vec![0.3, 0.9, 0.1])).unwrap(), 0.5);
    }

    #[test]
    fn empty_vector_rejected() {
        let m = SequenceLstm::<f32>::zeros(8);
        assert!(matches!(predict_study(&m, &vector(vec![])), Err(ClassifierError::EmptySequence(_))));
    }

    #[test]
    fn outputs_stay_in_range() {
        let m = SequenceLstm::<f32>::new(128, 1.0, 4);
        for len in [1, 7, 50, 100] {
            let p = predict_study(&m, &vector((0..len).map(|i| (i % 10) as f64 / 9.0).collect())).unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn single_class_rejected() {
        let vs: Vec<ProbabilityVector> = (0..4)
            .map(|i| ProbabilityVector {
                study_id: format!("s{i}"),
                label: Some(true),
                probs: vec![0.9],
            })
            .collect();
        assert!(matches!(train_rnn(&vs, &RnnConfig::default()), Err(ClassifierError::Data(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SequenceLstm::<f32>::new(16, 1.0, 2);
        let c = rnn_checkpoint(&m, &RnnConfig::default(), 3).unwrap();
        assert_eq!(rnn_from_checkpoint(&c).unwrap(), m);
    }
}
