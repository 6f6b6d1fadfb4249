//! 2-D cross-correlation (no kernel flip) with zero padding, via im2col + GEMM.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    /// "Same" padding for odd kernels: `(k - 1) / 2` per side, giving
    /// `ceil(input / stride)` outputs.
    pub fn same(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            stride,
            padding: ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2),
        }
    }

    /// Output extents, or `None` when the kernel exceeds the padded input.
    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 || kh > h + 2 * ph || kw > w + 2 * pw {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, spec: &Conv2dSpec) -> Result<Self> {
        let (&[n, c, h, w], &[o, c2, kh, kw]) = (input.shape(), weight.shape()) else {
            return Err(Error::dim("conv2d", input.shape(), weight.shape()));
        };
        if c != c2 {
            return Err(Error::dim("conv2d", input.shape(), weight.shape()));
        }
        let (ho, wo) = spec
            .output_hw(h, w, kh, kw)
            .ok_or_else(|| Error::dim("conv2d", input.shape(), weight.shape()))?;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 stride-1 unpadded kernels read the input directly as the column matrix.
    fn is_pointwise(&self, spec: &Conv2dSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == (1, 1) && spec.padding == (0, 0)
    }
}

/// Output columns `ox` whose input column `ox·sw + kj − pw` lies inside `[0, w)`.
fn valid_cols(wo: usize, w: usize, sw: usize, kj: usize, pw: usize) -> (usize, usize) {
    let lo = pw.saturating_sub(kj).div_ceil(sw).min(wo);
    let hi = if w + pw > kj { ((w + pw - kj - 1) / sw + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, spec: &Conv2dSpec, cols: &mut [T]) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g.wo, g.w, sw, kj, pw);
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = oy * sh + ki;
                    if iy < ph || iy - ph >= g.h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - ph) * g.w..(iy - ph + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * sw + kj - pw;
                        if sw == 1 {
                            drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, s) in drow[lo..hi].iter_mut().zip(src[start..].iter().step_by(sw)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, spec: &Conv2dSpec, x: &mut [T]) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g.wo, g.w, sw, kj, pw);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = oy * sh + ki;
                    if iy < ph || iy - ph >= g.h {
                        continue;
                    }
                    let drow = &mut plane[(iy - ph) * g.w..(iy - ph + 1) * g.w];
                    let start = lo * sw + kj - pw;
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if sw == 1 {
                        for (d, &v) in drow[start..start + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in drow[start..].iter_mut().step_by(sw).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `input[N,C,H,W] ⋆ weight[O,C,kh,kw] → [N,O,H',W']`, with
/// `H' = floor((H + 2ph - kh) / sh) + 1` (likewise for W').
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let g = Geometry::check(input, weight, &spec)?;
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut cols = if g.is_pointwise(&spec) { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let x = &input.data()[n * in_stride..(n + 1) * in_stride];
        let cols_ref: &[T] = if g.is_pointwise(&spec) {
            x
        } else {
            im2col(x, &g, &spec, &mut cols);
            &cols
        };
        T::gemm(
            g.o,
            k,
            p,
            (weight.data(), k as isize, 1),
            (cols_ref, p as isize, 1),
            T::zero(),
            (&mut out[n * g.o * p..(n + 1) * g.o * p], p as isize, 1),
        );
    }
    let out = Tensor::new(&[g.n, g.o, g.ho, g.wo], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Vector–Jacobian products of [`conv2d`]: `(grad_input, grad_weight)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Geometry::check(input, weight, &spec)?;
    if grad_out.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(Error::dim(
            "conv2d_backward",
            grad_out.shape(),
            &[g.n, g.o, g.ho, g.wo],
        ));
    }
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.c * g.h * g.w;
    let pointwise = g.is_pointwise(&spec);
    let mut grad_w = vec![T::zero(); g.o * k];
    let mut grad_in = vec![T::zero(); input.len()];
    let mut cols = vec![T::zero(); k * p];
    let mut grad_cols = vec![T::zero(); k * p];
    for n in 0..g.n {
        let x = &input.data()[n * in_stride..(n + 1) * in_stride];
        let go = &grad_out.data()[n * g.o * p..(n + 1) * g.o * p];
        let cols_ref: &[T] = if pointwise {
            x
        } else {
            im2col(x, &g, &spec, &mut cols);
            &cols
        };
        // grad_w[O,K] += go[O,P] · colsᵀ[P,K]
        T::gemm(
            g.o,
            p,
            k,
            (go, p as isize, 1),
            (cols_ref, 1, p as isize),
            T::one(),
            (&mut grad_w, k as isize, 1),
        );
        // grad_cols[K,P] = weightᵀ[K,O] · go[O,P]
        let gi = &mut grad_in[n * in_stride..(n + 1) * in_stride];
        if pointwise {
            T::gemm(
                k,
                g.o,
                p,
                (weight.data(), 1, k as isize),
                (go, p as isize, 1),
                T::zero(),
                (gi, p as isize, 1),
            );
        } else {
            T::gemm(
                k,
                g.o,
                p,
                (weight.data(), 1, k as isize),
                (go, p as isize, 1),
                T::zero(),
                (&mut grad_cols, p as isize, 1),
            );
            col2im_add(&grad_cols, &g, &spec, gi);
        }
    }
    let grad_in = Tensor::new(input.shape(), grad_in)?;
    let grad_w = Tensor::new(weight.shape(), grad_w)?;
    grad_in.ensure_finite("conv2d_backward")?;
    grad_w.ensure_finite("conv2d_backward")?;
    Ok((grad_in, grad_w))
}
