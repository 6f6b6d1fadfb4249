//! Squeeze-and-excitation, the ResNet-SE block and the frame-level stack.
//!
//! Feature maps are `[N, C, F, T]` (batch, channels, frequency, time).

use rand::Rng;

use crate::config::{EncoderConfig, StemOrder, Variant};
use crate::error::{Error, Result};
use crate::layers::{scoped, BatchNorm2d, Conv2d, Linear, Mode, Module, Visitor};
use crate::tensor::{relu, relu_backward, sigmoid, sigmoid_backward, Scalar, Tensor};

fn feature_map_dims<T: Scalar>(h: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *h.shape() {
        [n, c, f, t] => Ok((n, c, f * t)),
        _ => Err(Error::dim(op, h.shape(), &[])),
    }
}

/// Channel-wise mean over all spatial positions: `[N,C,F,T] → [N,C]`.
pub fn squeeze<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, p) = feature_map_dims(h, "squeeze")?;
    let pf = T::lit(p as f64);
    let data = h
        .data()
        .chunks(p)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / pf)
        .collect();
    Tensor::new(&[n, c], data)
}

/// `ĥ[n,c,f,t] = s[n,c] · h[n,c,f,t]`.
pub fn se_rescale<T: Scalar>(h: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, p) = feature_map_dims(h, "se_rescale")?;
    if s.shape() != [n, c] {
        return Err(Error::dim("se_rescale", h.shape(), s.shape()));
    }
    let mut out = h.clone();
    for (plane, &w) in out.data_mut().chunks_mut(p).zip(s.data()) {
        plane.iter_mut().for_each(|v| *v *= w);
    }
    Ok(out)
}

/// Channel gates `s = σ(W2 δ(W1 z))` of a squeeze-and-excitation block.
pub fn excitation<T: Scalar>(z: &Tensor<T>, se: &SeBlock<T>) -> Result<Tensor<T>> {
    let a = se.fc1.infer(z)?;
    let c = se.fc2.infer(&relu(&a))?;
    Ok(sigmoid(&c))
}

#[derive(Clone, Debug)]
struct SeCache<T> {
    h: Tensor<T>,
    a: Tensor<T>,
    s: Tensor<T>,
}

/// Squeeze-and-excitation over `C` channels with reduction ratio `r`.
#[derive(Clone, Debug)]
pub struct SeBlock<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    cache: Option<Option<SeCache<T>>>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "SE block: {channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(channels, hidden, rng),
            fc2: Linear::new(hidden, channels, rng),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_dim()
    }

    /// With `enabled == false` the gates are fixed at 1 and the block is the identity.
    pub fn infer(&self, h: &Tensor<T>, enabled: bool) -> Result<Tensor<T>> {
        if !enabled {
            return Ok(h.clone());
        }
        let s = excitation(&squeeze(h)?, self)?;
        se_rescale(h, &s)
    }

    pub fn forward(&mut self, h: &Tensor<T>, enabled: bool, mode: Mode) -> Result<Tensor<T>> {
        if !enabled {
            self.cache = Some(None);
            return Ok(h.clone());
        }
        let z = squeeze(h)?;
        let a = self.fc1.forward(&z, mode)?;
        let c = self.fc2.forward(&relu(&a), mode)?;
        let s = sigmoid(&c);
        let out = se_rescale(h, &s)?;
        self.cache = Some(Some(SeCache { h: h.clone(), a, s }));
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("SE block: backward without forward".into()))?;
        let Some(SeCache { h, a, s }) = cache else {
            return Ok(grad.clone());
        };
        let (n, c, p) = feature_map_dims(&h, "se backward")?;
        let mut gs = Tensor::zeros(&[n, c]);
        for ((gsv, hp), gp) in gs
            .data_mut()
            .iter_mut()
            .zip(h.data().chunks(p))
            .zip(grad.data().chunks(p))
        {
            *gsv = hp.iter().zip(gp).fold(T::zero(), |acc, (&x, &g)| acc + x * g);
        }
        let gc = sigmoid_backward(&s, &gs)?;
        let gb = self.fc2.backward(&gc)?;
        let ga = relu_backward(&a, &gb)?;
        let gz = self.fc1.backward(&ga)?;
        let mut gh = se_rescale(grad, &s)?;
        let pf = T::lit(p as f64);
        for (plane, &g) in gh.data_mut().chunks_mut(p).zip(gz.data()) {
            let share = g / pf;
            plane.iter_mut().for_each(|v| *v += share);
        }
        Ok(gh)
    }
}

impl<T: Scalar> Module<T> for SeBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.fc1.visit(&scoped(prefix, "fc1"), v);
        self.fc2.visit(&scoped(prefix, "fc2"), v);
    }
}

/// Kernel sizes of the five convolutions of a ResNet-SE block, in execution order.
pub const BLOCK_KERNELS: [usize; 5] = [3, 3, 1, 3, 3];

/// Per-layer strides of a block whose net stride is `s`.
pub fn block_strides(s: usize) -> [usize; 5] {
    [s, 1, s, 1, 1]
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    n1: Tensor<T>,
    u: Tensor<T>,
    m1: Tensor<T>,
    v: Tensor<T>,
}

/// Two residual sub-units sharing one block:
///
/// - A: conv3(s) → BN → ReLU → conv3 → BN → SE, plus a conv1(s) → BN shortcut, → ReLU
/// - B: conv3 → BN → ReLU → conv3 → BN → SE, plus identity, → ReLU
#[derive(Clone, Debug)]
pub struct ResNetSeBlock<T> {
    pub conv_a1: Conv2d<T>,
    pub bn_a1: BatchNorm2d<T>,
    pub conv_a2: Conv2d<T>,
    pub bn_a2: BatchNorm2d<T>,
    pub se_a: SeBlock<T>,
    pub conv_skip: Conv2d<T>,
    pub bn_skip: BatchNorm2d<T>,
    pub conv_b1: Conv2d<T>,
    pub bn_b1: BatchNorm2d<T>,
    pub conv_b2: Conv2d<T>,
    pub bn_b2: BatchNorm2d<T>,
    pub se_b: SeBlock<T>,
    cache: Option<BlockCache<T>>,
}

impl<T: Scalar> ResNetSeBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let k = BLOCK_KERNELS;
        let s = block_strides(stride);
        let conv_a1 = Conv2d::new(in_ch, out_ch, (k[0], k[0]), (s[0], s[0]), rng);
        let conv_a2 = Conv2d::new(out_ch, out_ch, (k[1], k[1]), (s[1], s[1]), rng);
        let conv_skip = Conv2d::new(in_ch, out_ch, (k[2], k[2]), (s[2], s[2]), rng);
        let conv_b1 = Conv2d::new(out_ch, out_ch, (k[3], k[3]), (s[3], s[3]), rng);
        let conv_b2 = Conv2d::new(out_ch, out_ch, (k[4], k[4]), (s[4], s[4]), rng);
        Ok(Self {
            conv_a1,
            bn_a1: BatchNorm2d::new(out_ch),
            conv_a2,
            bn_a2: BatchNorm2d::new(out_ch),
            se_a: SeBlock::new(out_ch, reduction, rng)?,
            conv_skip,
            bn_skip: BatchNorm2d::new(out_ch),
            conv_b1,
            bn_b1: BatchNorm2d::new(out_ch),
            conv_b2,
            bn_b2: BatchNorm2d::new(out_ch),
            se_b: SeBlock::new(out_ch, reduction, rng)?,
            cache: None,
        })
    }

    pub fn infer(&self, x: &Tensor<T>, variant: Variant) -> Result<Tensor<T>> {
        let se = variant.uses_se();
        let r1 = relu(&self.bn_a1.infer(&self.conv_a1.infer(x)?)?);
        let e2 = self.se_a.infer(&self.bn_a2.infer(&self.conv_a2.infer(&r1)?)?, se)?;
        let sk = self.bn_skip.infer(&self.conv_skip.infer(x)?)?;
        let ya = relu(&e2.add(&sk)?);
        let q1 = relu(&self.bn_b1.infer(&self.conv_b1.infer(&ya)?)?);
        let e3 = self.se_b.infer(&self.bn_b2.infer(&self.conv_b2.infer(&q1)?)?, se)?;
        Ok(relu(&e3.add(&ya)?))
    }

    pub fn forward(&mut self, x: &Tensor<T>, variant: Variant, mode: Mode) -> Result<Tensor<T>> {
        let se = variant.uses_se();
        let a1 = self.conv_a1.forward(x, mode)?;
        let n1 = self.bn_a1.forward(&a1, mode)?;
        let a2 = self.conv_a2.forward(&relu(&n1), mode)?;
        let n2 = self.bn_a2.forward(&a2, mode)?;
        let e2 = self.se_a.forward(&n2, se, mode)?;
        let sk = self.conv_skip.forward(x, mode)?;
        let sk = self.bn_skip.forward(&sk, mode)?;
        let u = e2.add(&sk)?;
        let ya = relu(&u);
        let b1 = self.conv_b1.forward(&ya, mode)?;
        let m1 = self.bn_b1.forward(&b1, mode)?;
        let b2 = self.conv_b2.forward(&relu(&m1), mode)?;
        let m2 = self.bn_b2.forward(&b2, mode)?;
        let e3 = self.se_b.forward(&m2, se, mode)?;
        let v = e3.add(&ya)?;
        let y = relu(&v);
        self.cache = Some(BlockCache { n1, u, m1, v });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let BlockCache { n1, u, m1, v } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("ResNet-SE block: backward without forward".into()))?;
        let gv = relu_backward(&v, grad)?;
        let g = self.se_b.backward(&gv)?;
        let g = self.bn_b2.backward(&g)?;
        let g = self.conv_b2.backward(&g)?;
        let g = relu_backward(&m1, &g)?;
        let g = self.bn_b1.backward(&g)?;
        let mut gya = self.conv_b1.backward(&g)?;
        gya.add_assign(&gv)?;

        let gu = relu_backward(&u, &gya)?;
        let g = self.se_a.backward(&gu)?;
        let g = self.bn_a2.backward(&g)?;
        let g = self.conv_a2.backward(&g)?;
        let g = relu_backward(&n1, &g)?;
        let g = self.bn_a1.backward(&g)?;
        let mut gx = self.conv_a1.backward(&g)?;
        let gs = self.bn_skip.backward(&gu)?;
        gx.add_assign(&self.conv_skip.backward(&gs)?)?;
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for ResNetSeBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        let p = |n: &str| scoped(prefix, n);
        self.conv_a1.visit(&p("conv_a1"), v);
        self.bn_a1.visit(&p("bn_a1"), v);
        self.conv_a2.visit(&p("conv_a2"), v);
        self.bn_a2.visit(&p("bn_a2"), v);
        self.se_a.visit(&p("se_a"), v);
        self.conv_skip.visit(&p("conv_skip"), v);
        self.bn_skip.visit(&p("bn_skip"), v);
        self.conv_b1.visit(&p("conv_b1"), v);
        self.bn_b1.visit(&p("bn_b1"), v);
        self.conv_b2.visit(&p("conv_b2"), v);
        self.bn_b2.visit(&p("bn_b2"), v);
        self.se_b.visit(&p("se_b"), v);
    }
}

/// `[N, C, F, T] → [N, T, C·F]`, flattening channel-major per time step.
fn flatten_frames<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, f, t] = h.shape() else {
        return Err(Error::dim("flatten_frames", h.shape(), &[]));
    };
    let d = c * f;
    let src = h.data();
    let mut out = vec![T::zero(); n * t * d];
    for b in 0..n {
        for ci in 0..c {
            for fi in 0..f {
                let row = &src[((b * c + ci) * f + fi) * t..((b * c + ci) * f + fi + 1) * t];
                for (ti, &v) in row.iter().enumerate() {
                    out[(b * t + ti) * d + ci * f + fi] = v;
                }
            }
        }
    }
    Tensor::new(&[n, t, d], out)
}

fn unflatten_frames<T: Scalar>(g: &Tensor<T>, c: usize, f: usize) -> Result<Tensor<T>> {
    let &[n, t, d] = g.shape() else {
        return Err(Error::dim("unflatten_frames", g.shape(), &[]));
    };
    if d != c * f {
        return Err(Error::dim("unflatten_frames", g.shape(), &[c, f]));
    }
    let src = g.data();
    let mut out = vec![T::zero(); n * c * f * t];
    for b in 0..n {
        for ti in 0..t {
            for (k, &v) in src[(b * t + ti) * d..(b * t + ti + 1) * d].iter().enumerate() {
                out[((b * c + k / f) * f + k % f) * t + ti] = v;
            }
        }
    }
    Tensor::new(&[n, c, f, t], out)
}

#[derive(Clone, Debug)]
struct StemCache<T> {
    pre: Tensor<T>,
    out_cf: (usize, usize),
}

/// Stem (Conv2D + ReLU + BN) followed by the ResNet-SE blocks.
#[derive(Clone, Debug)]
pub struct FrameLevelExtractor<T> {
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    pub blocks: Vec<ResNetSeBlock<T>>,
    config: EncoderConfig,
    cache: Option<StemCache<T>>,
}

impl<T: Scalar> FrameLevelExtractor<T> {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let k = config.stem_kernel;
        let stem = Conv2d::new(1, ch[0], (k, k), (config.stem_stride, config.stem_stride), rng);
        let mut blocks = Vec::with_capacity(ch.len() - 1);
        for (i, w) in ch.windows(2).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResNetSeBlock::new(w[0], w[1], stride, config.reduction, rng)?);
        }
        Ok(Self {
            stem,
            stem_bn: BatchNorm2d::new(ch[0]),
            blocks,
            config: config.clone(),
            cache: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_input(&self, mel: &Tensor<T>) -> Result<()> {
        let &[_, 1, f, t] = mel.shape() else {
            return Err(Error::dim("frame_features", mel.shape(), &[0, 1, self.config.n_mels, 0]));
        };
        if f != self.config.n_mels {
            return Err(Error::dim("frame_features", mel.shape(), &[0, 1, self.config.n_mels, 0]));
        }
        let needed = self.config.total_stride();
        if t < needed {
            return Err(Error::InputLength {
                needed,
                got: t,
                unit: "frames",
            });
        }
        Ok(())
    }

    fn stem_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.stem.infer(x)?;
        Ok(match self.config.stem_order {
            StemOrder::ConvReluBn => self.stem_bn.infer(&relu(&c))?,
            StemOrder::ConvBnRelu => relu(&self.stem_bn.infer(&c)?),
        })
    }

    /// `[N, 1, F, T] → [N, T', D]` frame-level features.
    pub fn infer(&self, mel: &Tensor<T>, variant: Variant) -> Result<Tensor<T>> {
        self.check_input(mel)?;
        let mut h = self.stem_infer(mel)?;
        for b in &self.blocks {
            h = b.infer(&h, variant)?;
        }
        flatten_frames(&h)
    }

    pub fn forward(&mut self, mel: &Tensor<T>, variant: Variant, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(mel)?;
        let c = self.stem.forward(mel, mode)?;
        let (pre, mut h) = match self.config.stem_order {
            StemOrder::ConvReluBn => {
                let out = self.stem_bn.forward(&relu(&c), mode)?;
                (c, out)
            }
            StemOrder::ConvBnRelu => {
                let n = self.stem_bn.forward(&c, mode)?;
                let out = relu(&n);
                (n, out)
            }
        };
        for b in &mut self.blocks {
            h = b.forward(&h, variant, mode)?;
        }
        let out_cf = (h.shape()[1], h.shape()[2]);
        self.cache = Some(StemCache { pre, out_cf });
        flatten_frames(&h)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let StemCache { pre, out_cf } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("frame extractor: backward without forward".into()))?;
        let mut g = unflatten_frames(grad, out_cf.0, out_cf.1)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = match self.config.stem_order {
            StemOrder::ConvReluBn => relu_backward(&pre, &self.stem_bn.backward(&g)?)?,
            StemOrder::ConvBnRelu => self.stem_bn.backward(&relu_backward(&pre, &g)?)?,
        };
        self.stem.backward(&g)
    }
}

impl<T: Scalar> Module<T> for FrameLevelExtractor<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.stem.visit(&scoped(prefix, "stem"), v);
        self.stem_bn.visit(&scoped(prefix, "stem_bn"), v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&scoped(prefix, &format!("block{i}")), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn squeeze_of_constant_is_constant() {
        let h = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| (i / 20) as f64 + 0.25);
        let z = squeeze(&h).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        for (i, &v) in z.data().iter().enumerate() {
            assert_eq!(v, i as f64 + 0.25);
        }
    }

    #[test]
    fn squeeze_two_frames() {
        // channel 0 frames (1, 2), channel 1 frames (3, 4)
        let h = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(squeeze(&h).unwrap().data(), &[1.5, 3.5]);
    }

    #[test]
    fn squeeze_is_permutation_invariant() {
        let h = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| (i * i) as f64 * 0.5);
        let mut p = h.clone();
        p.data_mut()[..6].reverse();
        p.data_mut()[6..].rotate_left(2);
        let (a, b) = (squeeze(&h).unwrap(), squeeze(&p).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let mut se = SeBlock::<f64>::new(16, 8, &mut rng(0)).unwrap();
        se.fc1.weight.value.fill(0.0);
        se.fc2.weight.value.fill(0.0);
        let z = Tensor::from_fn(&[3, 16], |i| i as f64 - 7.0);
        assert!(excitation(&z, &se).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rescale_cases() {
        let h = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64 + 1.0);
        let ones = Tensor::full(&[1, 2], 1.0);
        assert_eq!(se_rescale(&h, &ones).unwrap(), h);
        assert_eq!(se_rescale(&h, &Tensor::zeros(&[1, 2])).unwrap().max_abs(), 0.0);
        let s = Tensor::from_f64(&[1, 2], &[0.5, 2.0]).unwrap();
        let out = se_rescale(&h, &s).unwrap();
        assert_eq!(out.data(), &[0.5, 1.0, 1.5, 2.0, 10.0, 12.0, 14.0, 16.0]);
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(SeBlock::<f64>::new(12, 8, &mut rng(0)).is_err());
    }

    #[test]
    fn block_shape_contracts() {
        let mut r = rng(1);
        let b1 = ResNetSeBlock::<f64>::new(8, 8, 1, 8, &mut r).unwrap();
        let x = Tensor::from_fn(&[1, 8, 12, 10], |i| (i as f64 * 0.37).sin());
        assert_eq!(b1.infer(&x, Variant::Ddse).unwrap().shape(), x.shape());

        let b2 = ResNetSeBlock::<f64>::new(1, 8, 2, 8, &mut r).unwrap();
        let x = Tensor::from_fn(&[1, 1, 256, 100], |i| (i as f64 * 0.011).cos());
        assert_eq!(b2.infer(&x, Variant::Ddse).unwrap().shape(), &[1, 8, 128, 50]);
    }

    #[test]
    fn sub_unit_b_is_identity_with_zeroed_convs_and_unit_gates() {
        let mut r = rng(2);
        let mut block = ResNetSeBlock::<f64>::new(8, 8, 1, 8, &mut r).unwrap();
        let x = Tensor::from_fn(&[2, 8, 6, 5], |i| (i as f64 * 0.13).sin());
        for c in [&mut block.conv_b1, &mut block.conv_b2] {
            c.weight.value.fill(0.0);
        }
        // Sub-unit A alone: the block output must equal A's (non-negative) output.
        let se = false;
        let r1 = relu(&block.bn_a1.infer(&block.conv_a1.infer(&x).unwrap()).unwrap());
        let e2 = block
            .se_a
            .infer(&block.bn_a2.infer(&block.conv_a2.infer(&r1).unwrap()).unwrap(), se)
            .unwrap();
        let sk = block.bn_skip.infer(&block.conv_skip.infer(&x).unwrap()).unwrap();
        let ya = relu(&e2.add(&sk).unwrap());
        assert_eq!(block.infer(&x, Variant::Resnet).unwrap(), ya);
        let mut trained = block.clone();
        let y = trained.forward(&x, Variant::Resnet, Mode::Train).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn eval_forward_matches_infer_bitwise() {
        let mut r = rng(3);
        let mut block = ResNetSeBlock::<f64>::new(8, 16, 2, 8, &mut r).unwrap();
        let x = Tensor::from_fn(&[2, 8, 9, 7], |i| (i as f64 * 0.71).sin());
        block.forward(&x, Variant::Ddse, Mode::Train).unwrap();
        let a = block.forward(&x, Variant::Ddse, Mode::Eval).unwrap();
        let b = block.infer(&x, Variant::Ddse).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flatten_round_trip() {
        let h = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let f = flatten_frames(&h).unwrap();
        assert_eq!(f.shape(), &[2, 5, 12]);
        assert_eq!(f.at(&[1, 2, 7]), h.at(&[1, 1, 3, 2]));
        assert_eq!(unflatten_frames(&f, 3, 4).unwrap(), h);
    }

    #[test]
    fn extractor_shapes() {
        let cfg = EncoderConfig {
            channels: vec![8, 8, 8, 8, 8],
            ..EncoderConfig::default()
        };
        let ex = FrameLevelExtractor::<f64>::new(&cfg, &mut rng(4)).unwrap();
        for (t, t_out) in [(8, 1), (100, 13), (37, 5)] {
            let mel = Tensor::from_fn(&[1, 1, 256, t], |i| (i as f64 * 0.003).sin());
            let h = ex.infer(&mel, Variant::Ddse).unwrap();
            assert_eq!(h.shape(), &[1, t_out, 8 * 32]);
        }
        let short = Tensor::zeros(&[1, 1, 256, 7]);
        assert!(matches!(ex.infer(&short, Variant::Ddse), Err(Error::InputLength { needed: 8, got: 7, .. })));
        let wrong_bands = Tensor::zeros(&[1, 1, 128, 16]);
        assert!(matches!(ex.infer(&wrong_bands, Variant::Ddse), Err(Error::Dimension { .. })));
    }
}
