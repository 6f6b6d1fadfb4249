//! Stateful layers with hand-written backward passes, parameter bookkeeping
//! and optimizers.
//!
//! Each layer caches what its backward pass needs during `forward`, and
//! `backward` consumes that cache, accumulating parameter gradients into the
//! layer's [`Param`]s. The `infer` methods are the read-only evaluation path:
//! they never cache or mutate, so a frozen model can be shared across threads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, matmul, Conv2dSpec, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable value together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Receives every parameter and buffer of a [`Module`] under a dotted name.
pub trait Visitor<T: Scalar> {
    fn param(&mut self, name: &str, param: &mut Param<T>);

    fn buffer(&mut self, name: &str, value: &mut Tensor<T>) {
        let _ = (name, value);
    }
}

/// Anything that owns parameters. Visit order is stable and defines the
/// checkpoint record order.
pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>);
}

pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

struct FnVisitor<F>(F);

impl<T: Scalar, F: FnMut(&str, &mut Param<T>)> Visitor<T> for FnVisitor<F> {
    fn param(&mut self, name: &str, param: &mut Param<T>) {
        (self.0)(name, param)
    }
}

pub fn for_each_param<T: Scalar, M: Module<T> + ?Sized>(m: &mut M, f: impl FnMut(&str, &mut Param<T>)) {
    m.visit("", &mut FnVisitor(f));
}

pub fn zero_grads<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) {
    for_each_param(m, |_, p| p.zero_grad());
}

pub fn param_count<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) -> usize {
    let mut n = 0;
    for_each_param(m, |_, p| n += p.value.len());
    n
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Adds `bias[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
pub(crate) fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner = x.len() / (n * c);
    let b = bias.data();
    for (i, chunk) in x.data_mut().chunks_mut(inner).enumerate() {
        let bc = b[i % c];
        chunk.iter_mut().for_each(|v| *v += bc);
    }
}

/// Per-channel sums of an `[N, C, ...]` tensor.
pub(crate) fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner = x.len() / (n * c);
    let mut out = Tensor::zeros(&[c]);
    let o = out.data_mut();
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        o[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
    out
}

fn take_cache<C>(cache: &mut Option<C>, layer: &str) -> Result<C> {
    cache
        .take()
        .ok_or_else(|| Error::State(format!("{layer}: backward called without a cached forward")))
}

/// 2-D convolution with per-output-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub spec: Conv2dSpec,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Same-padded convolution with Kaiming-uniform weights and zero bias.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        Self {
            weight: Param::new(kaiming_uniform(&[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            spec: Conv2dSpec::same(kernel, stride),
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.weight.value, self.spec)?;
        add_channel_bias(&mut y, &self.bias.value);
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take_cache(&mut self.cache, "conv2d")?;
        let (gi, gw) = conv2d_backward(&x, &self.weight.value, grad, self.spec)?;
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&channel_sums(grad))?;
        Ok(gi)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&scoped(prefix, "weight"), &mut self.weight);
        v.param(&scoped(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Batch normalization over `[N, C, H, W]` (statistics per channel over N·H·W).
///
/// Train mode normalizes with the biased batch variance and folds the unbiased
/// estimate into the running variance; eval mode uses the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let c = self.gamma.value.len();
        if x.rank() < 2 || x.shape()[1] != c {
            return Err(Error::dim("batch_norm", x.shape(), &[c]));
        }
        let n = x.shape()[0];
        Ok((n, c, x.len() / (n * c)))
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let c = mean.len();
        let inner = x.len() / (x.shape()[0] * c);
        let mut xhat = x.clone();
        let mut y = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for (i, (hc, yc)) in xhat
            .data_mut()
            .chunks_mut(inner)
            .zip(y.data_mut().chunks_mut(inner))
            .enumerate()
        {
            let ch = i % c;
            for (h, yv) in hc.iter_mut().zip(yc.iter_mut()) {
                *h = (*h - mean[ch]) * inv_std[ch];
                *yv = g[ch] * *h + b[ch];
            }
        }
        (xhat, y)
    }

    fn eval_stats(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::lit(self.eps);
        let inv = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        (self.running_mean.data().to_vec(), inv)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.geometry(x)?;
        let (mean, inv) = self.eval_stats();
        Ok(self.normalize(x, &mean, &inv).1)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, inner) = self.geometry(x)?;
        let (mean, inv_std) = match mode {
            Mode::Eval => self.eval_stats(),
            Mode::Train => {
                let m = n * inner;
                if m < 2 {
                    return Err(Error::DegenerateStatistics(format!(
                        "batch norm over {:?} has a single element per channel",
                        x.shape()
                    )));
                }
                let mut sum = vec![T::zero(); c];
                for (i, chunk) in x.data().chunks(inner).enumerate() {
                    sum[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                }
                let mf = T::lit(m as f64);
                let mean: Vec<T> = sum.iter().map(|&s| s / mf).collect();
                let mut sq = vec![T::zero(); c];
                for (i, chunk) in x.data().chunks(inner).enumerate() {
                    let mu = mean[i % c];
                    sq[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
                }
                let var: Vec<T> = sq.iter().map(|&s| s / mf).collect();
                let mom = T::lit(self.momentum);
                let unbias = mf / T::lit((m - 1) as f64);
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
                let eps = T::lit(self.eps);
                let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
        };
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(BatchNormCache { xhat, inv_std, mode });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = take_cache(&mut self.cache, "batch_norm")?;
        if grad.shape() != cache.xhat.shape() {
            return Err(Error::dim("batch_norm backward", grad.shape(), cache.xhat.shape()));
        }
        let (n, c, inner) = self.geometry(grad)?;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (gc, hc)) in grad
            .data()
            .chunks(inner)
            .zip(cache.xhat.data().chunks(inner))
            .enumerate()
        {
            for (&g, &h) in gc.iter().zip(hc) {
                sum_g[i % c] += g;
                sum_gx[i % c] += g * h;
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_gx[ch];
            self.beta.grad.data_mut()[ch] += sum_g[ch];
        }
        let gamma = self.gamma.value.data();
        let mf = T::lit((n * inner) as f64);
        let mut gi = grad.clone();
        for (i, (gc, hc)) in gi
            .data_mut()
            .chunks_mut(inner)
            .zip(cache.xhat.data().chunks(inner))
            .enumerate()
        {
            let ch = i % c;
            let k = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Eval => gc.iter_mut().for_each(|g| *g *= k),
                Mode::Train => {
                    let (mg, mgx) = (sum_g[ch] / mf, sum_gx[ch] / mf);
                    for (g, &h) in gc.iter_mut().zip(hc) {
                        *g = k * (*g - mg - h * mgx);
                    }
                }
            }
        }
        Ok(gi)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&scoped(prefix, "gamma"), &mut self.gamma);
        v.param(&scoped(prefix, "beta"), &mut self.beta);
        v.buffer(&scoped(prefix, "running_mean"), &mut self.running_mean);
        v.buffer(&scoped(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully connected layer on `[N, in] → [N, out]` with `weight: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(Tensor::zeros(&[out_dim])),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (i, o) = (self.in_dim(), self.out_dim());
        let &[n, d] = x.shape() else {
            return Err(Error::dim("linear", x.shape(), self.weight.value.shape()));
        };
        if d != i {
            return Err(Error::dim("linear", x.shape(), self.weight.value.shape()));
        }
        let mut y = vec![T::zero(); n * o];
        T::gemm(
            n,
            i,
            o,
            (x.data(), i as isize, 1),
            (self.weight.value.data(), 1, i as isize),
            T::zero(),
            (&mut y, o as isize, 1),
        );
        let b = self.bias.value.data();
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        let y = Tensor::new(&[n, o], y)?;
        y.ensure_finite("linear")?;
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take_cache(&mut self.cache, "linear")?;
        let (n, i, o) = (x.shape()[0], self.in_dim(), self.out_dim());
        if grad.shape() != [n, o] {
            return Err(Error::dim("linear backward", grad.shape(), &[n, o]));
        }
        // grad_w[o,i] += gradᵀ[o,n] · x[n,i]
        T::gemm(
            o,
            n,
            i,
            (grad.data(), 1, o as isize),
            (x.data(), i as isize, 1),
            T::one(),
            (self.weight.grad.data_mut(), i as isize, 1),
        );
        let gb = grad.sum_axis(0)?;
        self.bias.grad.add_assign(&gb)?;
        matmul(grad, &self.weight.value)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&scoped(prefix, "weight"), &mut self.weight);
        v.param(&scoped(prefix, "bias"), &mut self.bias);
    }
}

/// An owned, ordered snapshot of named parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    params: Vec<(String, Param<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        Ok(())
    }

    pub fn push_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.check_unique(name)?;
        self.params.push((name.to_string(), Param::new(value)));
        Ok(())
    }

    pub fn push_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.check_unique(name)?;
        self.buffers.push((name.to_string(), value));
        Ok(())
    }

    /// Clones every parameter (with its gradient) and buffer of `m`.
    pub fn capture<M: Module<T> + ?Sized>(m: &mut M) -> Self {
        struct Capture<T>(ParameterSet<T>);
        impl<T: Scalar> Visitor<T> for Capture<T> {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                self.0.params.push((name.to_string(), p.clone()));
            }
            fn buffer(&mut self, name: &str, t: &mut Tensor<T>) {
                self.0.buffers.push((name.to_string(), t.clone()));
            }
        }
        let mut c = Capture(Self::new());
        m.visit("", &mut c);
        c.0
    }

    /// Writes values and buffers back into `m` by name; every entry of `m`
    /// must be present with a matching shape.
    pub fn apply_to<M: Module<T> + ?Sized>(&self, m: &mut M) -> Result<()> {
        struct Apply<'a, T> {
            src: &'a ParameterSet<T>,
            err: Option<Error>,
        }
        impl<T: Scalar> Apply<'_, T> {
            fn copy(&mut self, name: &str, dst: &mut Tensor<T>) {
                if self.err.is_some() {
                    return;
                }
                match self.src.get(name) {
                    Some(src) if src.shape() == dst.shape() => *dst = src.clone(),
                    Some(src) => self.err = Some(Error::dim("parameter load", src.shape(), dst.shape())),
                    None => self.err = Some(Error::Contract(format!("missing parameter `{name}`"))),
                }
            }
        }
        impl<T: Scalar> Visitor<T> for Apply<'_, T> {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                self.copy(name, &mut p.value);
            }
            fn buffer(&mut self, name: &str, t: &mut Tensor<T>) {
                self.copy(name, t);
            }
        }
        let mut a = Apply { src: self, err: None };
        m.visit("", &mut a);
        a.err.map_or(Ok(()), Err)
    }

    /// Value of a parameter or buffer.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| &p.value)
            .or_else(|| self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }
}

impl<T: Scalar> Module<T> for ParameterSet<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (name, p) in &mut self.params {
            v.param(&scoped(prefix, name), p);
        }
        for (name, t) in &mut self.buffers {
            v.buffer(&scoped(prefix, name), t);
        }
    }
}

/// Global L2 norm of all gradients; fails on the first non-finite gradient.
pub fn grad_global_norm<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) -> Result<f64> {
    let mut total = 0.0;
    let mut bad = None;
    for_each_param(m, |name, p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(name.to_string());
        }
        total += p.grad.norm_sq().as_f64();
    });
    match bad {
        Some(name) => Err(Error::NonFiniteGradient(name)),
        None => Ok(total.sqrt()),
    }
}

fn clip_factor(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

pub trait Optimizer<T: Scalar> {
    /// Applies one update from the accumulated gradients, then zeroes them.
    fn step(&mut self, m: &mut dyn Module<T>) -> Result<()>;
}

/// Plain gradient descent with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub clip: Option<f64>,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, m: &mut dyn Module<T>) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        let k = T::lit(self.lr * clip_factor(grad_global_norm(m)?, self.clip));
        for_each_param(m, |_, p| {
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= k * g;
            }
            p.zero_grad();
        });
        Ok(())
    }
}

/// `p ← p − lr·clip(g)` over a [`ParameterSet`], zeroing the gradients.
pub fn sgd_step<T: Scalar>(params: &mut ParameterSet<T>, lr: f64, grad_clip: Option<f64>) -> Result<()> {
    Sgd { lr, clip: grad_clip }.step(params)
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    t: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, m: &mut dyn Module<T>) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        let scale = T::lit(clip_factor(grad_global_norm(m)?, self.clip));
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let moments = &mut self.moments;
        let mut idx = 0;
        for_each_param(m, |_, p| {
            if idx == moments.len() {
                moments.push((Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            }
            let (m1, m2) = &mut moments[idx];
            idx += 1;
            for (((v, &g), a), b) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m1.data_mut())
                .zip(m2.data_mut())
            {
                let g = g * scale;
                *a = b1 * *a + (T::one() - b1) * g;
                *b = b2 * *b + (T::one() - b2) * g * g;
                *v -= lr * (*a / c1) / ((*b / c2).sqrt() + eps);
            }
            p.zero_grad();
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_set(p: f64, g: f64) -> ParameterSet<f64> {
        let mut s = ParameterSet::new();
        s.push_param("p", Tensor::full(&[1], p)).unwrap();
        s.param_mut("p").unwrap().grad = Tensor::full(&[1], g);
        s
    }

    #[test]
    fn sgd_zero_lr_is_a_no_op() {
        let mut s = scalar_set(1.0, 2.0);
        sgd_step(&mut s, 0.0, None).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.0]);
        assert_eq!(s.param_mut("p").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn sgd_scalar_step() {
        let mut s = scalar_set(1.0, 2.0);
        sgd_step(&mut s, 0.1, None).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_clips_global_norm() {
        let mut s = scalar_set(0.0, 5.0);
        sgd_step(&mut s, 1.0, Some(1.0)).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[-1.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_set(0.0, f64::NAN);
        match sgd_step(&mut s, 0.1, None) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = scalar_set(1.0, 3.0);
        Adam::new(0.01, None).step(&mut s).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterSet::<f64>::new();
        s.push_param("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.push_buffer("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fc = Linear::<f64>::new(3, 3, &mut rng);
        fc.weight.value = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 0., -1.]).unwrap();
        assert_eq!(fc.infer(&x).unwrap(), x);
    }

    #[test]
    fn linear_weight_grad_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fc = Linear::<f64>::new(3, 2, &mut rng);
        let x = Tensor::from_f64(&[1, 3], &[1., 2., 3.]).unwrap();
        let g = Tensor::from_f64(&[1, 2], &[0.5, -1.]).unwrap();
        fc.forward(&x, Mode::Train).unwrap();
        fc.backward(&g).unwrap();
        assert_eq!(fc.weight.grad.data(), &[0.5, 1.0, 1.5, -1., -2., -3.]);
        assert_eq!(fc.bias.grad.data(), &[0.5, -1.]);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut fc = Linear::<f64>::new(2, 2, &mut rng);
        assert!(matches!(fc.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
        let mut bn = BatchNorm2d::<f64>::new(2);
        assert!(matches!(bn.backward(&Tensor::zeros(&[1, 2, 1, 1])), Err(Error::State(_))));
    }

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 37) % 11) as f64 * 0.7 - 2.0);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).map(move |k| (n, k)))
                .map(|(n, k)| y.data()[(n * 2 + ch) * 4 + k])
                .collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batch_norm_eval_identity_and_no_mutation() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        let x = Tensor::from_fn(&[2, 3, 2, 1], |i| i as f64 - 5.0);
        let before = (bn.running_mean.clone(), bn.running_var.clone());
        let y = bn.forward(&x, Mode::Eval).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4 * x.max_abs());
        assert_eq!((bn.running_mean.clone(), bn.running_var.clone()), before);
        assert_eq!(bn.infer(&x).unwrap(), y);
    }

    #[test]
    fn batch_norm_single_element_is_degenerate() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::full(&[1, 1, 1, 1], 2.0);
        assert!(matches!(bn.forward(&x, Mode::Train), Err(Error::DegenerateStatistics(_))));
    }

    #[test]
    fn parameter_set_capture_apply_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Conv2d::<f64>::new(2, 3, (3, 3), (1, 1), &mut rng);
        let mut b = Conv2d::<f64>::new(2, 3, (3, 3), (1, 1), &mut rng);
        let snap = ParameterSet::capture(&mut a);
        snap.apply_to(&mut b).unwrap();
        assert_eq!(a.weight.value, b.weight.value);
        let mut wrong = Conv2d::<f64>::new(2, 4, (3, 3), (1, 1), &mut rng);
        assert!(snap.apply_to(&mut wrong).is_err());
    }
}
