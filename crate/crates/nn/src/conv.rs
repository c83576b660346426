//! 3×3 convolution, stride 1, zero padding 1 ("same"), via im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const K: usize = 3;

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
}

fn check(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Dims> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 {
        return shape_err(format!("conv2d input must be NCHW, got {:?}", xs));
    }
    if ws.len() != 4 || ws[2] != K || ws[3] != K {
        return shape_err(format!("conv2d weight must be O×C×3×3, got {:?}", ws));
    }
    if ws[1] != xs[1] {
        return shape_err(format!(
            "conv2d input has {} channels, weight expects {}",
            xs[1], ws[1]
        ));
    }
    if b.shape() != [ws[0]] {
        return shape_err(format!("conv2d bias {:?} for {} outputs", b.shape(), ws[0]));
    }
    Ok(Dims {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        o: ws[0],
    })
}

/// Unrolls one sample `[C, H, W]` into `[C*9, H*W]` patch columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ch * K + ky) * K + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch-column gradients back onto one `[C, H, W]` sample.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ch * K + ky) * K + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * w..(oy + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d = *d + s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (`[N, C, H, W]`) with `weight` (`[O, C, 3, 3]`) plus a
/// per-output-channel bias. Output is `[N, O, H, W]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = check(x, weight, bias)?;
    let hw = d.h * d.w;
    let ck = d.c * K * K;
    let mut y = Tensor::zeros(&[d.n, d.o, d.h, d.w]);
    let mut cols = vec![T::zero(); ck * hw];
    for n in 0..d.n {
        im2col(x.sample(n), d.c, d.h, d.w, &mut cols);
        let out = y.sample_mut(n);
        for (o, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(bias.data()[o]);
        }
        T::gemm(
            d.o,
            ck,
            hw,
            T::one(),
            weight.data(),
            ck as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::one(),
            out,
            hw as isize,
            1,
        );
    }
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let bias_shape = Tensor::<T>::zeros(&[weight.shape().first().copied().unwrap_or(0)]);
    let d = check(x, weight, &bias_shape)?;
    if grad_y.shape() != [d.n, d.o, d.h, d.w] {
        return shape_err(format!("conv2d upstream gradient {:?}", grad_y.shape()));
    }
    let hw = d.h * d.w;
    let ck = d.c * K * K;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[d.o]);
    let mut cols = vec![T::zero(); ck * hw];
    let mut gcols = vec![T::zero(); ck * hw];
    for n in 0..d.n {
        let gy = grad_y.sample(n);
        for (o, row) in gy.chunks_exact(hw).enumerate() {
            gb.data_mut()[o] = gb.data()[o] + row.iter().copied().sum();
        }
        im2col(x.sample(n), d.c, d.h, d.w, &mut cols);
        // gW[o, ck] += gY[o, hw] · colsᵀ[hw, ck]
        T::gemm(
            d.o,
            hw,
            ck,
            T::one(),
            gy,
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            T::one(),
            gw.data_mut(),
            ck as isize,
            1,
        );
        // gcols[ck, hw] = Wᵀ[ck, o] · gY[o, hw]
        T::gemm(
            ck,
            d.o,
            hw,
            T::one(),
            weight.data(),
            1,
            ck as isize,
            gy,
            hw as isize,
            1,
            T::zero(),
            &mut gcols,
            hw as isize,
            1,
        );
        col2im(&gcols, d.c, d.h, d.w, gx.sample_mut(n));
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}
