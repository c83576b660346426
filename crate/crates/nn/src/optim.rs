use crate::error::{shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with classical momentum: `v = μ·v + g; θ -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NnError::Argument(format!("learning rate {lr} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::Argument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            lr: T::from_f64_lossy(lr),
            momentum: T::from_f64_lossy(momentum),
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err(format!("{} parameter tensors, {} gradients", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return shape_err(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
        {
            return shape_err("parameter set changed between optimizer steps");
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + gv;
                *w = *w - self.lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn plain_step() {
        let mut w = scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut [&mut w], &[scalar(1.0)]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = scalar(0.37);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut [&mut w], &[scalar(0.0)]).unwrap();
        assert_eq!(w.data()[0], 0.37);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut w = scalar(0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut [&mut w], &[scalar(1.0)]).unwrap();
        assert!((w.data()[0] + 0.1).abs() < 1e-12);
        opt.step(&mut [&mut w], &[scalar(1.0)]).unwrap();
        assert!((opt.velocity[0][0] - 1.9).abs() < 1e-12);
        assert!((w.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(Sgd::<f32>::new(0.0, 0.5).is_err());
        assert!(Sgd::<f32>::new(0.1, 1.0).is_err());
        let mut w = scalar(0.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        let g = Tensor::zeros(&[2]);
        assert!(opt.step(&mut [&mut w], &[g]).is_err());
    }
}
