use super::{axis_layout, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`] given its input `x`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
}

#[inline]
fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(grad, |s, g| g * s * (T::one() - s))
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Backward of [`tanh`] given its output `y`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(grad, |t, g| g * (T::one() - t * t))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, t| m.max(d[at(t)]));
            let mut total = T::zero();
            for t in 0..len {
                let e = (d[at(t)] - max).exp();
                d[at(t)] = e;
                total += e;
            }
            for t in 0..len {
                d[at(t)] /= total;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax`] given its output `y`: `y ⊙ (g − Σ g⊙y)`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if y.shape() != grad.shape() {
        return Err(Error::dim("softmax_backward", y.shape(), grad.shape()));
    }
    let (outer, len, inner) = axis_layout(y.shape(), axis)?;
    let mut out = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), grad.data());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let dot = (0..len).fold(T::zero(), |acc, t| acc + yd[at(t)] * gd[at(t)]);
            for t in 0..len {
                od[at(t)] = yd[at(t)] * (gd[at(t)] - dot);
            }
        }
    }
    Ok(out)
}
