//! Central finite-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so exact-zero gradients compare
/// as absolute differences.
pub const REL_FLOOR: f64 = 1e-6;

/// Result of one loss evaluation during a check.
///
/// `signature` fingerprints the discrete choices the forward pass made (ReLU
/// masks, pooling winners). A probe whose `+ε` and `-ε` evaluations disagree
/// with the base signature straddles a kink and is skipped.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub signature: u64,
}

impl From<f64> for Evaluation {
    fn from(loss: f64) -> Self {
        Self { loss, signature: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Probes {
    /// Every element of every tensor.
    All,
    /// Up to `per_tensor` seeded random elements from each tensor.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub skipped_kinks: usize,
    /// `(tensor index, element index)` of the worst probe.
    pub worst: Option<(usize, usize)>,
}

/// Compares `analytic` gradients with central differences of `loss` over
/// `tensors` (parameters and inputs alike). Tensors are restored afterwards.
///
/// Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn grad_check<F, E>(
    tensors: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    epsilon: f64,
    probes: Probes,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> E,
    E: Into<Evaluation>,
{
    if tensors.len() != analytic.len() {
        return shape_err(format!("{} tensors but {} gradients", tensors.len(), analytic.len()));
    }
    for (t, g) in tensors.iter().zip(analytic) {
        if t.shape() != g.shape() {
            return shape_err(format!("tensor {:?} vs gradient {:?}", t.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(NnError::NonFinite("analytic gradient".into()));
        }
    }
    if !(epsilon > 0.0) {
        return Err(NnError::Argument("epsilon must be positive".into()));
    }
    let base: Evaluation = loss(tensors).into();
    if !base.loss.is_finite() {
        return Err(NnError::NonFinite("loss".into()));
    }
    let mut rng = match probes {
        Probes::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Probes::All => None,
    };
    let mut report = GradCheckReport::default();
    for ti in 0..tensors.len() {
        let len = tensors[ti].len();
        let indices: Vec<usize> = match (&probes, rng.as_mut()) {
            (Probes::Sample { per_tensor, .. }, Some(rng)) if *per_tensor < len => {
                let mut v = sample(rng, len, *per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for idx in indices {
            let orig = tensors[ti].data()[idx];
            tensors[ti].data_mut()[idx] = orig + epsilon;
            let plus: Evaluation = loss(tensors).into();
            tensors[ti].data_mut()[idx] = orig - epsilon;
            let minus: Evaluation = loss(tensors).into();
            tensors[ti].data_mut()[idx] = orig;
            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Err(NnError::NonFinite("perturbed loss".into()));
            }
            if plus.signature != base.signature || minus.signature != base.signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * epsilon);
            let a = analytic[ti].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.probes += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, idx));
            }
        }
    }
    Ok(report)
}
