use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vcf_nn::{
    conv2d, conv2d_backward, cross_entropy, dense, dense_backward, dropout, dropout_backward, init, maxpool3,
    maxpool3_backward, relu, relu_backward, softmax, softmax_cross_entropy_backward, Checkpoint, DropoutMask,
    LayerEntry, Mode, ModelDescriptor, PoolIndices, Scalar, Sgd, Tensor,
};

use super::augment::{augment_patch, MAX_ROTATION_DEG};
use super::{derive_seed, fingerprint, ClassifierError, ProbabilityVector};
use crate::segmentation::{PatchSequence, PATCH_PIXELS, PATCH_SIDE};

pub const CNN_ARCHITECTURE: &str = "vcf-patch-cnn";
/// `(in, out)` channels of the five 3×3 convolutions.
pub const CONV_CHANNELS: [(usize, usize); 5] = [(1, 32), (32, 64), (64, 64), (64, 128), (128, 128)];
/// Whether a 3×3/2 max-pool follows each convolution.
pub const POOL_AFTER: [bool; 5] = [true, false, true, false, true];
pub const FLAT_FEATURES: usize = 128 * 4 * 4;
pub const HIDDEN_UNITS: usize = 512;
pub const CLASSES: usize = 2;
const INFERENCE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub max_rotation_deg: f64,
    /// Value given to pixels rotated in from outside the patch.
    pub rotation_fill: f32,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            dropout: 0.5,
            seed: 0,
            max_rotation_deg: MAX_ROTATION_DEG,
            rotation_fill: 0.0,
        }
    }
}

impl CnnConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ClassifierError::Argument("epochs and batch size must be positive".into()));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return Err(ClassifierError::Argument(format!(
                "rotation bound {} outside [0, 18]",
                self.max_rotation_deg
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ClassifierError::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn param_names() -> Vec<String> {
    let mut names = Vec::new();
    for i in 1..=CONV_CHANNELS.len() {
        names.push(format!("conv{i}.weight"));
        names.push(format!("conv{i}.bias"));
    }
    for i in 1..=2 {
        names.push(format!("fc{i}.weight"));
        names.push(format!("fc{i}.bias"));
    }
    names
}

fn param_shapes() -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for (c, o) in CONV_CHANNELS {
        shapes.push(vec![o, c, 3, 3]);
        shapes.push(vec![o]);
    }
    shapes.push(vec![HIDDEN_UNITS, FLAT_FEATURES]);
    shapes.push(vec![HIDDEN_UNITS]);
    shapes.push(vec![CLASSES, HIDDEN_UNITS]);
    shapes.push(vec![CLASSES]);
    shapes
}

/// conv32-pool, conv64-conv64-pool, conv128-conv128-pool, dense512-dropout,
/// dense2-softmax, all hidden layers ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCnn<T> {
    params: Vec<Tensor<T>>,
    pub dropout: f64,
}

/// Activations kept for the backward pass.
pub struct CnnForward<T> {
    conv_inputs: Vec<Tensor<T>>,
    conv_pre: Vec<Tensor<T>>,
    pools: Vec<Option<PoolIndices>>,
    flat: Tensor<T>,
    fc1_pre: Tensor<T>,
    fc1_out: Tensor<T>,
    mask: DropoutMask<T>,
    pub probs: Tensor<T>,
}

impl<T: Scalar> CnnForward<T> {
    /// Fingerprint of every ReLU sign pattern and pooling winner.
    pub fn signature(&self) -> u64 {
        let mut bits = Vec::new();
        for z in self.conv_pre.iter().chain(std::iter::once(&self.fc1_pre)) {
            bits.extend(z.data().iter().map(|&v| (v > T::zero()) as usize));
        }
        for p in self.pools.iter().flatten() {
            bits.extend_from_slice(&p.argmax);
        }
        fingerprint(&bits)
    }

    /// Probability of the positive class per sample.
    pub fn positive_probs(&self) -> Vec<f64> {
        self.probs.data().chunks_exact(CLASSES).map(|r| r[1].to_f64_lossy()).collect()
    }
}

impl<T: Scalar> PatchCnn<T> {
    /// He-normal weights, zero biases.
    pub fn new(seed: u64, dropout: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = shape[1..].iter().product();
                    init::he_normal(&shape, fan_in, &mut rng)
                }
            })
            .collect();
        Self { params, dropout }
    }

    pub fn zeros() -> Self {
        Self {
            params: param_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
            dropout: 0.5,
        }
    }

    pub fn from_params(params: Vec<Tensor<T>>, dropout: f64) -> Result<Self, ClassifierError> {
        let shapes = param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(ClassifierError::Shape("CNN parameter shapes do not match the architecture".into()));
        }
        Ok(Self { params, dropout })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> PatchCnn<U> {
        PatchCnn {
            params: self.params.iter().map(|p| p.cast()).collect(),
            dropout: self.dropout,
        }
    }

    /// `x` is `[N, 1, 32, 32]`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<CnnForward<T>, ClassifierError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != PATCH_SIDE || s[3] != PATCH_SIDE {
            return Err(ClassifierError::Shape(format!("CNN input must be [N, 1, 32, 32], got {s:?}")));
        }
        let n = s[0];
        let mut h = x.clone();
        let mut conv_inputs = Vec::with_capacity(5);
        let mut conv_pre = Vec::with_capacity(5);
        let mut pools = Vec::with_capacity(5);
        for (i, &pool) in POOL_AFTER.iter().enumerate() {
            let z = conv2d(&h, &self.params[2 * i], &self.params[2 * i + 1])?;
            let a = relu(&z);
            conv_inputs.push(std::mem::replace(&mut h, a));
            conv_pre.push(z);
            if pool {
                let (p, idx) = maxpool3(&h)?;
                h = p;
                pools.push(Some(idx));
            } else {
                pools.push(None);
            }
        }
        let flat = h.reshape(&[n, FLAT_FEATURES])?;
        let fc1_pre = dense(&flat, &self.params[10], &self.params[11])?;
        let (fc1_out, mask) = dropout(&relu(&fc1_pre), self.dropout, mode, dropout_seed)?;
        let logits = dense(&fc1_out, &self.params[12], &self.params[13])?;
        let probs = softmax(&logits)?;
        Ok(CnnForward {
            conv_inputs,
            conv_pre,
            pools,
            flat,
            fc1_pre,
            fc1_out,
            mask,
            probs,
        })
    }

    /// Mean cross-entropy of a forward pass and its parameter gradients.
    pub fn backward(&self, fwd: &CnnForward<T>, labels: &[usize]) -> Result<(T, Vec<Tensor<T>>), ClassifierError> {
        let loss = cross_entropy(&fwd.probs, labels)?;
        let mut grads: Vec<Tensor<T>> = Vec::with_capacity(self.params.len());
        let g = softmax_cross_entropy_backward(&fwd.probs, labels)?;
        let fc2 = dense_backward(&fwd.fc1_out, &self.params[12], &g)?;
        let g = dropout_backward(&fc2.input, &fwd.mask)?;
        let g = relu_backward(&fwd.fc1_pre, &g)?;
        let fc1 = dense_backward(&fwd.flat, &self.params[10], &g)?;
        let n = fwd.flat.shape()[0];
        let mut g = fc1.input.reshape(&[n, 128, 4, 4])?;
        let mut conv_grads = Vec::with_capacity(5);
        for i in (0..POOL_AFTER.len()).rev() {
            if let Some(idx) = &fwd.pools[i] {
                g = maxpool3_backward(&g, idx)?;
            }
            g = relu_backward(&fwd.conv_pre[i], &g)?;
            let cg = conv2d_backward(&fwd.conv_inputs[i], &self.params[2 * i], &g)?;
            g = cg.input;
            conv_grads.push((cg.weight, cg.bias));
        }
        for (w, b) in conv_grads.into_iter().rev() {
            grads.push(w);
            grads.push(b);
        }
        grads.extend([fc1.weight, fc1.bias, fc2.weight, fc2.bias]);
        Ok((loss, grads))
    }

    /// Positive-class probability for each patch, in eval mode.
    pub fn predict_batch(&self, patches: &[&[f32]]) -> Result<Vec<f64>, ClassifierError> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFERENCE_BATCH) {
            let x = batch_tensor(chunk)?;
            out.extend(self.forward(&x, Mode::Eval, 0)?.positive_probs());
        }
        Ok(out)
    }
}

fn batch_tensor<T: Scalar>(patches: &[&[f32]]) -> Result<Tensor<T>, ClassifierError> {
    let mut data = Vec::with_capacity(patches.len() * PATCH_PIXELS);
    for p in patches {
        if p.len() != PATCH_PIXELS {
            return Err(ClassifierError::Shape(format!("patch has {} values, expected 1024", p.len())));
        }
        data.extend(p.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::from_vec(&[patches.len(), 1, PATCH_SIDE, PATCH_SIDE], data)?)
}

pub fn predict_patch(model: &PatchCnn<f32>, patch: &[f32]) -> Result<f64, ClassifierError> {
    Ok(model.predict_batch(&[patch])?[0])
}

/// Per-patch probabilities in sequence order.
pub fn score_sequence(model: &PatchCnn<f32>, seq: &PatchSequence) -> Result<ProbabilityVector, ClassifierError> {
    if seq.is_empty() {
        return Err(ClassifierError::EmptySequence(seq.study_id.clone()));
    }
    let patches: Vec<&[f32]> = seq.patches.iter().map(|p| p.pixels.as_slice()).collect();
    let probs = model.predict_batch(&patches)?;
    let labels: Vec<bool> = seq.patches.iter().filter_map(|p| p.label).collect();
    let label = (labels.len() == seq.len()).then(|| labels.iter().any(|&l| l));
    Ok(ProbabilityVector {
        study_id: seq.study_id.clone(),
        label,
        probs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub study_id: String,
    pub pixels: Vec<f32>,
    pub label: bool,
}

impl LabeledPatch {
    /// Every labelled patch of a sequence.
    pub fn from_sequence(seq: &PatchSequence) -> Vec<LabeledPatch> {
        seq.patches
            .iter()
            .filter_map(|p| {
                p.label.map(|label| LabeledPatch {
                    study_id: seq.study_id.clone(),
                    pixels: p.pixels.clone(),
                    label,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_acc\n");
    for h in history {
        let acc = h.val_acc.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, acc));
    }
    s
}

pub struct CnnTraining {
    pub model: PatchCnn<f32>,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Fraction of patches whose thresholded prediction matches the label.
pub fn patch_accuracy(model: &PatchCnn<f32>, patches: &[LabeledPatch]) -> Result<f64, ClassifierError> {
    let refs: Vec<&[f32]> = patches.iter().map(|p| p.pixels.as_slice()).collect();
    let probs = model.predict_batch(&refs)?;
    let correct = probs.iter().zip(patches).filter(|(p, l)| (**p >= 0.5) == l.label).count();
    Ok(correct as f64 / patches.len().max(1) as f64)
}

/// Mini-batch SGD on cross-entropy. Every epoch reshuffles with a seeded RNG
/// and gives each training patch a fresh rotation.
pub fn train_cnn(
    train: &[LabeledPatch],
    val: &[LabeledPatch],
    config: &CnnConfig,
) -> Result<CnnTraining, ClassifierError> {
    config.validate()?;
    let positives = train.iter().filter(|p| p.label).count();
    if positives == 0 || positives == train.len() {
        return Err(ClassifierError::Data("training patches hold a single class".into()));
    }
    let mut model = PatchCnn::<f32>::new(derive_seed(config.seed, &[0]), config.dropout);
    let mut sgd = Sgd::<f32>::new(config.lr, config.momentum)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut augmented = Vec::with_capacity(batch.len());
            for &i in batch {
                let angle = if config.max_rotation_deg > 0.0 {
                    rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg)
                } else {
                    0.0
                };
                augmented.push(augment_patch(&train[i].pixels, angle, config.rotation_fill)?);
            }
            let refs: Vec<&[f32]> = augmented.iter().map(|p| p.as_slice()).collect();
            let x = batch_tensor::<f32>(&refs)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label as usize).collect();
            let fwd = model.forward(&x, Mode::Train, derive_seed(config.seed, &[2, epoch as u64, b as u64]))?;
            let (loss, grads) = model.backward(&fwd, &labels)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(ClassifierError::Diverged { epoch });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            let mut params: Vec<&mut Tensor<f32>> = model.params.iter_mut().collect();
            sgd.step(&mut params, &grads)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_acc = if val.is_empty() { None } else { Some(patch_accuracy(&model, val)?) };
        log::info!("cnn epoch {epoch}: train loss {train_loss:.4}, val acc {val_acc:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
    }
    let checkpoint = cnn_checkpoint(&model, config, config.epochs)?;
    Ok(CnnTraining {
        model,
        history,
        checkpoint,
    })
}

pub fn cnn_checkpoint(model: &PatchCnn<f32>, config: &CnnConfig, epoch: usize) -> Result<Checkpoint, ClassifierError> {
    let layers = param_names()
        .into_iter()
        .zip(param_shapes())
        .map(|(name, shape)| LayerEntry { name, shape })
        .collect();
    let mut hyperparameters = BTreeMap::new();
    hyperparameters.insert("lr".into(), json!(config.lr));
    hyperparameters.insert("momentum".into(), json!(config.momentum));
    hyperparameters.insert("batch_size".into(), json!(config.batch_size));
    hyperparameters.insert("dropout".into(), json!(config.dropout));
    hyperparameters.insert("epochs".into(), json!(config.epochs));
    hyperparameters.insert("max_rotation_deg".into(), json!(config.max_rotation_deg));
    let descriptor = ModelDescriptor {
        version: vcf_nn::checkpoint::CHECKPOINT_VERSION,
        architecture: CNN_ARCHITECTURE.into(),
        layers,
        seed: config.seed,
        epoch,
        hyperparameters,
    };
    Ok(Checkpoint::new(descriptor, model.params.clone())?)
}

pub fn cnn_from_checkpoint(ckpt: &Checkpoint) -> Result<PatchCnn<f32>, ClassifierError> {
    if ckpt.descriptor.architecture != CNN_ARCHITECTURE {
        return Err(ClassifierError::Checkpoint(format!(
            "architecture {:?} is not {CNN_ARCHITECTURE}",
            ckpt.descriptor.architecture
        )));
    }
    let names: Vec<String> = ckpt.descriptor.layers.iter().map(|l| l.name.clone()).collect();
    if names != param_names() {
        return Err(ClassifierError::Checkpoint("layer list does not match the CNN".into()));
    }
    let dropout = ckpt.descriptor.hyperparameters.get("dropout").and_then(|v| v.as_f64()).unwrap_or(0.5);
    PatchCnn::from_params(ckpt.tensors.clone(), dropout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_the_architecture() {
        let m = PatchCnn::<f32>::new(1, 0.5);
        let x = Tensor::zeros(&[3, 1, 32, 32]);
        let f = m.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(f.probs.shape(), &[3, 2]);
        assert_eq!(f.flat.shape(), &[3, 2048]);
        let (_, grads) = m.backward(&f, &[0, 1, 1]).unwrap();
        for (g, p) in grads.iter().zip(m.params()) {
            assert_eq!(g.shape(), p.shape());
        }
    }

    #[test]
    fn probabilities_are_normalized_and_pure() {
        let m = PatchCnn::<f32>::new(3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4 {
            let p: Vec<f32> = (0..1024).map(|_| rng.random()).collect();
            let x = batch_tensor::<f32>(&[&p]).unwrap();
            let f = m.forward(&x, Mode::Eval, 0).unwrap();
            let row = f.probs.data();
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-6);
            let a = predict_patch(&m, &p).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert_eq!(a, predict_patch(&m, &p).unwrap());
        }
        assert!(predict_patch(&m, &[0.0; 10]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PatchCnn::<f32>::new(9, 0.5);
        let ckpt = cnn_checkpoint(&m, &CnnConfig::default(), 0).unwrap();
        assert_eq!(cnn_from_checkpoint(&ckpt).unwrap(), m);
        let mut bad = ckpt.clone();
        bad.descriptor.architecture = "other".into();
        assert!(cnn_from_checkpoint(&bad).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let p = LabeledPatch {
            study_id: "a".into(),
            pixels: vec![0.0; 1024],
            label: true,
        };
        let err = train_cnn(&[p.clone(), p], &[], &CnnConfig::default());
        assert!(matches!(err, Err(ClassifierError::Data(_))));
    }

    #[test]
    fn history_format() {
        let h = [
            EpochRecord { epoch: 1, train_loss: 0.5, val_acc: Some(0.75) },
            EpochRecord { epoch: 2, train_loss: 0.25, val_acc: None },
        ];
        assert_eq!(history_csv(&h), "epoch,train_loss,val_acc\n1,0.5,0.75\n2,0.25,\n");
    }
}
