//! Dense row-major tensors and the numeric kernels every layer is built from.
//!
//! All kernels are pure and deterministic: accumulation order is fixed, so
//! identical inputs give bit-identical outputs. Kernels that can overflow
//! (products and sums) check their output and report [`Error::NonFinite`].

mod activation;
mod conv;
mod scalar;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, softmax, softmax_backward, tanh,
    tanh_backward,
};
pub use conv::{conv2d, conv2d_backward, Conv2dSpec};
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Dense n-dimensional array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive: {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive: {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other` for identical shapes (gradient accumulation).
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        broadcast_op(self, other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        broadcast_op(self, other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        broadcast_op(self, other, "mul", |a, b| a * b)
    }

    /// Sum along `axis`, removing it from the shape (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_layout(&self.shape, axis)?;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &self.data[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Self { shape, data: out };
        t.ensure_finite("sum_axis")?;
        Ok(t)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = T::lit(self.shape.get(axis).copied().unwrap_or(1) as f64);
        Ok(self.sum_axis(axis)?.map(|v| v / n))
    }

    /// Left-to-right sum of all elements.
    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::lit(self.data.len() as f64)
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        let [r, c] = self.shape[..] else {
            return Err(Error::dim("transpose", &self.shape, &[]));
        };
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    /// Converts element type (e.g. `f64` compute to `f32` storage).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim("axis", shape, &[axis]));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, a, b)),
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0; rank];
    let lead = rank - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_op<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let out = a.zip_map(b, f)?;
        out.ensure_finite(op)?;
        return Ok(out);
    }
    let shape = broadcast_shape(&a.shape, &b.shape, op)?;
    let rank = shape.len();
    let sa = broadcast_strides(&a.shape, rank);
    let sb = broadcast_strides(&b.shape, rank);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[oa], b.data[ob]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
    let out = Tensor { shape, data };
    out.ensure_finite(op)?;
    Ok(out)
}

/// Matrix product of rank-2 tensors: `[M,K] × [K,N] → [M,N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        (a.data(), k as isize, 1),
        (b.data(), n as isize, 1),
        T::zero(),
        (&mut c, n as isize, 1),
    );
    let out = Tensor {
        shape: vec![m, n],
        data: c,
    };
    out.ensure_finite("matmul")?;
    Ok(out)
}
