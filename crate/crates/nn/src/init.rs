//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He-normal: `N(0, 2/fan_in)`.
pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `U(-bound, bound)`.
pub fn uniform<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
