//! Fully connected layer: `y = x·Wᵀ + b` over a `[N, in]` batch.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let ws = w.shape();
    if ws.len() != 2 {
        return shape_err(format!("dense weight must be [out, in], got {:?}", ws));
    }
    let (out, inp) = (ws[0], ws[1]);
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 || x.len() != n * inp {
        return shape_err(format!("dense input {:?} does not flatten to [N, {}]", x.shape(), inp));
    }
    Ok((n, inp, out))
}

/// Accepts any input whose trailing dimensions flatten to `in` features.
pub fn dense<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, inp, out) = dims(x, weight)?;
    if bias.shape() != [out] {
        return shape_err(format!("dense bias {:?} for {} outputs", bias.shape(), out));
    }
    let mut y = Tensor::zeros(&[n, out]);
    for row in y.data_mut().chunks_exact_mut(out) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        inp,
        out,
        T::one(),
        x.data(),
        inp as isize,
        1,
        weight.data(),
        1,
        inp as isize,
        T::one(),
        y.data_mut(),
        out as isize,
        1,
    );
    Ok(y)
}

/// The input gradient comes back in the caller's original input shape.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, inp, out) = dims(x, weight)?;
    if grad_y.shape() != [n, out] {
        return shape_err(format!("dense upstream gradient {:?}, expected [{}, {}]", grad_y.shape(), n, out));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[out]);
    // gX[n, in] = gY[n, out] · W[out, in]
    T::gemm(
        n,
        out,
        inp,
        T::one(),
        grad_y.data(),
        out as isize,
        1,
        weight.data(),
        inp as isize,
        1,
        T::zero(),
        gx.data_mut(),
        inp as isize,
        1,
    );
    // gW[out, in] = gYᵀ[out, n] · X[n, in]
    T::gemm(
        out,
        n,
        inp,
        T::one(),
        grad_y.data(),
        1,
        out as isize,
        x.data(),
        inp as isize,
        1,
        T::zero(),
        gw.data_mut(),
        inp as isize,
        1,
    );
    for row in grad_y.data().chunks_exact(out) {
        for (b, &g) in gb.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(DenseGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_by_hand() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        let expect = [1.0 - 3.0 + 0.1, 3.0 - 0.2, -1.0 - 1.0 + 0.1, 0.0 - 0.2];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_width_rejected() {
        let x = Tensor::<f32>::zeros(&[2, 4]);
        let w = Tensor::zeros(&[2, 3]);
        assert!(dense(&x, &w, &Tensor::zeros(&[2])).is_err());
    }
}
