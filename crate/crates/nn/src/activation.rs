//! Elementwise activations, dropout, softmax and cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_y.shape() {
        return shape_err(format!("relu {:?} vs gradient {:?}", x.shape(), grad_y.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Per-unit multipliers applied by a dropout forward pass (`0` or `1/(1-rate)`).
#[derive(Clone, Debug)]
pub struct DropoutMask<T> {
    pub scale: Vec<T>,
}

/// Inverted dropout. In eval mode the input passes through untouched.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::Argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutMask { scale: vec![T::one(); x.len()] }));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
    Ok((Tensor::from_vec(x.shape(), data)?, DropoutMask { scale }))
}

pub fn dropout_backward<T: Scalar>(grad_y: &Tensor<T>, mask: &DropoutMask<T>) -> Result<Tensor<T>> {
    if grad_y.len() != mask.scale.len() {
        return shape_err("dropout mask does not match gradient");
    }
    let data = grad_y.data().iter().zip(&mask.scale).map(|(&g, &s)| g * s).collect();
    Tensor::from_vec(grad_y.shape(), data)
}

/// Row-wise softmax over `[N, K]` logits, shifted by the row maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] == 0 {
        return shape_err(format!("softmax expects [N, K], got {:?}", s));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(s[1]) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return shape_err(format!("{} labels for probabilities {:?}", labels.len(), s));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(NnError::Label { label, classes: s[1] });
    }
    Ok(s[1])
}

/// Mean of `-ln(p[label])` over the batch, with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let k = check_labels(probs, labels)?;
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let total: T = probs
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| -row[l].max(floor).ln())
        .sum();
    Ok(total / T::from_usize(labels.len()).unwrap())
}

/// Gradient of the mean cross-entropy with respect to the softmax logits:
/// `(p - onehot) / N`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let k = check_labels(probs, labels)?;
    let inv_n = T::one() / T::from_usize(labels.len()).unwrap();
    let mut g = probs.clone();
    for (row, &l) in g.data_mut().chunks_exact_mut(k).zip(labels) {
        row[l] = row[l] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv_n;
        }
    }
    Ok(g)
}
