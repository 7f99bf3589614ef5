//! Value-level forms of the differentiable primitives.
//!
//! Each function runs the same kernel the tape records, on a throwaway
//! tape, so the two paths cannot drift apart.

use super::{NumericsError, Tape, Tensor};

/// `sqrt(2 / pi)`, pinned for the tanh approximation of GELU.
pub const GELU_TANH_COEFF: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

// With s = sigmoid(2u): 0.5 (1 + tanh u) = s and 1 - tanh(u)^2 = 4 s (1 - s).
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_TANH_COEFF * (x + GELU_CUBIC * x * x * x);
    x * sigmoid_scalar(2.0 * inner)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_TANH_COEFF * (x + GELU_CUBIC * x * x * x);
    let s = sigmoid_scalar(2.0 * inner);
    s + 2.0 * x * s * (1.0 - s) * GELU_TANH_COEFF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant_ref(a)?, tape.constant_ref(b)?);
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let v = tape.constant_ref(x)?;
    let out = tape.softmax_rows(v)?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant_ref(x)?, tape.constant_ref(gamma)?, tape.constant_ref(beta)?);
    let out = tape.layer_norm(vx, vg, vb, eps)?;
    Ok(tape.value(out).clone())
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| gelu_scalar(v)).collect())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

/// Mean cross-entropy of `logits` rows against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let v = tape.constant_ref(logits)?;
    let out = tape.cross_entropy(v, targets)?;
    Ok(tape.value(out).data()[0])
}
