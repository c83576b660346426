//! 3×3 max pooling, stride 2, same padding with −∞.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Argmax routing recorded by the forward pass: for every output element the
/// flat index of the winning input element.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Output extent along one axis: `ceil(len / 2)`.
pub fn pooled_dim(len: usize) -> usize {
    len.div_ceil(2)
}

fn pad_before(len: usize) -> usize {
    let out = pooled_dim(len);
    ((out - 1) * 2 + 3).saturating_sub(len) / 2
}

pub fn maxpool3<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let s = x.shape();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 {
        return shape_err(format!("maxpool3 input must be non-empty NCHW, got {:?}", s));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (pooled_dim(h), pooled_dim(w));
    let (ph, pw) = (pad_before(h) as isize, pad_before(w) as isize);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    let out = y.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = oy as isize * 2 - ph;
            for ox in 0..ow {
                let x0 = ox as isize * 2 - pw;
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for iy in y0.max(0)..(y0 + 3).min(h as isize) {
                    for ix in x0.max(0)..(x0 + 3).min(w as isize) {
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[k] = best;
                argmax.push(best_idx);
                k += 1;
            }
        }
    }
    Ok((
        y,
        PoolIndices {
            input_shape: s.to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool3_backward<T: Scalar>(grad_y: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_y.len() != indices.argmax.len() {
        return shape_err(format!(
            "maxpool3 upstream gradient has {} values, forward produced {}",
            grad_y.len(),
            indices.argmax.len()
        ));
    }
    let mut gx = Tensor::zeros(&indices.input_shape);
    let g = gx.data_mut();
    for (&idx, &v) in indices.argmax.iter().zip(grad_y.data()) {
        g[idx] = g[idx] + v;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::filled(&[1, 2, 7, 6], 3.25f32);
        let (y, _) = maxpool3(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn vgg_halving_chain() {
        let mut x = Tensor::filled(&[1, 1, 32, 32], 1.0f32);
        let mut sizes = vec![];
        for _ in 0..3 {
            x = maxpool3(&x).unwrap().0;
            sizes.push(x.shape()[2]);
        }
        assert_eq!(sizes, vec![16, 8, 4]);
        assert_eq!(x.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn backward_routes_to_winner() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 5.0, -2.0, 0.0]).unwrap();
        let (y, idx) = maxpool3(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = maxpool3_backward(&Tensor::filled(&[1, 1, 1, 1], 2.0), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
