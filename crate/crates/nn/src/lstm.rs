//! Single-layer LSTM over a sequence, with backpropagation through time.
//!
//! Gate rows are stacked in the order input, forget, candidate, output, so the
//! weight matrices have `4·hidden` rows.

use crate::error::{shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// `[4H, I]`
    pub w_ih: Tensor<T>,
    /// `[4H, H]`
    pub w_hh: Tensor<T>,
    /// `[4H]`
    pub bias: Tensor<T>,
}

pub struct LstmGrads<T> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub bias: Tensor<T>,
    /// Gradient with respect to every input value, same layout as the inputs.
    pub inputs: Vec<T>,
}

/// Activations kept from the forward pass for BPTT.
pub struct LstmTrace<T> {
    input_dim: usize,
    hidden: usize,
    steps: usize,
    inputs: Vec<T>,
    /// Activated gates per step, `[T, 4H]`.
    gates: Vec<T>,
    /// Cell states `c_0..c_T`, `[(T+1), H]`.
    cells: Vec<T>,
    /// Hidden states `h_0..h_T`, `[(T+1), H]`.
    hiddens: Vec<T>,
}

impl<T: Scalar> LstmTrace<T> {
    pub fn final_hidden(&self) -> &[T] {
        &self.hiddens[self.steps * self.hidden..]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input_dim]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let h = self.w_hh.shape().get(1).copied().unwrap_or(0);
        let ok = self.w_hh.shape() == [4 * h, h]
            && self.w_ih.shape().len() == 2
            && self.w_ih.shape()[0] == 4 * h
            && self.bias.shape() == [4 * h]
            && h > 0;
        if ok {
            Ok(())
        } else {
            shape_err(format!(
                "lstm params w_ih {:?}, w_hh {:?}, bias {:?}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.shape()
            ))
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] = acc[l] + a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut total = acc.iter().copied().sum::<T>();
    for i in chunks * 8..a.len() {
        total = total + a[i] * b[i];
    }
    total
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// Runs the recurrence from `h0 = c0 = 0` over `inputs` (`steps × input_dim`
/// values, step-major). The final hidden state is `trace.final_hidden()`.
pub fn lstm_sequence<T: Scalar>(inputs: &[T], params: &LstmParams<T>) -> Result<LstmTrace<T>> {
    params.validate()?;
    let (i_dim, h) = (params.input_dim(), params.hidden());
    if inputs.is_empty() {
        return Err(NnError::EmptySequence);
    }
    if inputs.len() % i_dim != 0 {
        return shape_err(format!("{} inputs for input dim {}", inputs.len(), i_dim));
    }
    let steps = inputs.len() / i_dim;
    let mut gates = vec![T::zero(); steps * 4 * h];
    let mut cells = vec![T::zero(); (steps + 1) * h];
    let mut hiddens = vec![T::zero(); (steps + 1) * h];
    let (w_ih, w_hh, bias) = (params.w_ih.data(), params.w_hh.data(), params.bias.data());

    for t in 0..steps {
        let x = &inputs[t * i_dim..(t + 1) * i_dim];
        let (h_prev, h_rest) = hiddens.split_at_mut((t + 1) * h);
        let h_prev = &h_prev[t * h..];
        let z = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for (r, zr) in z.iter_mut().enumerate() {
            *zr = bias[r] + dot(&w_ih[r * i_dim..(r + 1) * i_dim], x) + dot(&w_hh[r * h..(r + 1) * h], h_prev);
        }
        for r in 0..h {
            z[r] = sigmoid(z[r]);
            z[h + r] = sigmoid(z[h + r]);
            z[2 * h + r] = z[2 * h + r].tanh();
            z[3 * h + r] = sigmoid(z[3 * h + r]);
        }
        let (c_prev, c_rest) = cells.split_at_mut((t + 1) * h);
        let c_prev = &c_prev[t * h..];
        let c_next = &mut c_rest[..h];
        let h_next = &mut h_rest[..h];
        for r in 0..h {
            c_next[r] = z[h + r] * c_prev[r] + z[r] * z[2 * h + r];
            h_next[r] = z[3 * h + r] * c_next[r].tanh();
        }
    }
    if !hiddens.iter().all(|v| v.is_finite()) {
        return Err(NnError::NonFinite("lstm forward".into()));
    }
    Ok(LstmTrace {
        input_dim: i_dim,
        hidden: h,
        steps,
        inputs: inputs.to_vec(),
        gates,
        cells,
        hiddens,
    })
}

/// Backpropagation through time from a gradient on the final hidden state.
pub fn lstm_backward<T: Scalar>(
    trace: &LstmTrace<T>,
    params: &LstmParams<T>,
    grad_final_hidden: &[T],
) -> Result<LstmGrads<T>> {
    let (i_dim, h) = (trace.input_dim, trace.hidden);
    if grad_final_hidden.len() != h || params.hidden() != h || params.input_dim() != i_dim {
        return shape_err("lstm backward does not match its forward trace");
    }
    let mut g_ih = vec![T::zero(); 4 * h * i_dim];
    let mut g_hh = vec![T::zero(); 4 * h * h];
    let mut g_b = vec![T::zero(); 4 * h];
    let mut g_x = vec![T::zero(); trace.inputs.len()];
    let mut dh = grad_final_hidden.to_vec();
    let mut dc = vec![T::zero(); h];
    let mut dz = vec![T::zero(); 4 * h];
    let (w_ih, w_hh) = (params.w_ih.data(), params.w_hh.data());
    let one = T::one();

    for t in (0..trace.steps).rev() {
        let g = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        let c_prev = &trace.cells[t * h..(t + 1) * h];
        let c = &trace.cells[(t + 1) * h..(t + 2) * h];
        let h_prev = &trace.hiddens[t * h..(t + 1) * h];
        let x = &trace.inputs[t * i_dim..(t + 1) * i_dim];
        for r in 0..h {
            let (ig, fg, cg, og) = (g[r], g[h + r], g[2 * h + r], g[3 * h + r]);
            let tc = c[r].tanh();
            let d_o = dh[r] * tc;
            let dcr = dc[r] + dh[r] * og * (one - tc * tc);
            dz[r] = dcr * cg * ig * (one - ig);
            dz[h + r] = dcr * c_prev[r] * fg * (one - fg);
            dz[2 * h + r] = dcr * ig * (one - cg * cg);
            dz[3 * h + r] = d_o * og * (one - og);
            dc[r] = dcr * fg;
        }
        dh.fill(T::zero());
        let gx = &mut g_x[t * i_dim..(t + 1) * i_dim];
        for (r, &d) in dz.iter().enumerate() {
            g_b[r] = g_b[r] + d;
            axpy(d, x, &mut g_ih[r * i_dim..(r + 1) * i_dim]);
            axpy(d, h_prev, &mut g_hh[r * h..(r + 1) * h]);
            axpy(d, &w_ih[r * i_dim..(r + 1) * i_dim], gx);
            axpy(d, &w_hh[r * h..(r + 1) * h], &mut dh);
        }
    }
    Ok(LstmGrads {
        w_ih: Tensor::from_vec(params.w_ih.shape(), g_ih)?,
        w_hh: Tensor::from_vec(params.w_hh.shape(), g_hh)?,
        bias: Tensor::from_vec(params.bias.shape(), g_b)?,
        inputs: g_x,
    })
}
