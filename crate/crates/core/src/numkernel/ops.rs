use super::{Tensor1, Tensor2};
use crate::{Error, Result};

/// `W·x + b`.
pub fn affine(w: &Tensor2, b: &Tensor1, x: &Tensor1) -> Result<Tensor1> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::dim(
            format!("W{:?}, b({})", w.shape(), b.len()),
            format!("x({})", x.len()),
        ));
    }
    let mut out = Tensor1::zeros(w.rows());
    affine_into(w.as_slice(), b.as_slice(), x.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Unchecked slice form used by the network hot loops. `w` is row-major
/// `out.len() × x.len()`.
#[inline]
pub(crate) fn affine_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Dot product over four interleaved partial sums, which breaks the add
/// dependency chain. The grouping is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Max-shifted softmax written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &Tensor1) -> Tensor1 {
    let mut out = Tensor1::zeros(logits.len());
    softmax_into(logits.as_slice(), out.as_mut_slice());
    out
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits.
pub fn softmax_xent(logits: &Tensor1, label: usize) -> Result<(f64, Tensor1)> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    let mut grad = Tensor1::zeros(logits.len());
    let loss = softmax_xent_into(logits.as_slice(), label, grad.as_mut_slice());
    Ok((loss, grad))
}

/// Returns the loss and writes `softmax − onehot` into `grad`.
#[inline]
pub(crate) fn softmax_xent_into(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        sum += *g;
    }
    let loss = sum.ln() - (logits[label] - max);
    for g in grad.iter_mut() {
        *g /= sum;
    }
    grad[label] -= 1.0;
    loss
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
#[inline]
pub fn softplus_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] on `(0, ∞)`.
pub fn softplus_inv(y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Argument(format!("softplus_inv needs y > 0, got {y}")));
    }
    Ok(if y > 30.0 { y } else { y.exp_m1().ln() })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
