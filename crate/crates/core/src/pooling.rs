//! Utterance-level half of the encoder: attention, weighted statistics
//! pooling and the embedding head.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::config::{EncoderConfig, Variant};
use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::layers::{scoped, Linear, Mode, Module, Visitor};
use crate::se_resnet::FrameLevelExtractor;
use crate::tensor::{relu, relu_backward, softmax, softmax_backward, tanh, tanh_backward, Scalar, Tensor};

pub const EMBEDDING_DIM: usize = 128;

fn frame_dims<T: Scalar>(h: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *h.shape() {
        [n, t, d] => Ok((n, t, d)),
        _ => Err(Error::dim(op, h.shape(), &[])),
    }
}

#[derive(Clone, Debug)]
struct AttentionCache<T> {
    act: Tensor<T>,
    alpha: Tensor<T>,
}

/// Frame scorer `FC(D→A) → tanh → FC(A→1)`, normalized by a softmax over time.
#[derive(Clone, Debug)]
pub struct AttentionBlock<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    cache: Option<AttentionCache<T>>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(feature_dim: usize, attention_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(feature_dim, attention_dim, rng),
            fc2: Linear::new(attention_dim, 1, rng),
            cache: None,
        }
    }

    /// Unnormalized scores `[N, T']`.
    pub fn scores(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, t, d) = frame_dims(h, "attention")?;
        let flat = h.clone().reshape(&[n * t, d])?;
        let act = tanh(&self.fc1.infer(&flat)?);
        self.fc2.infer(&act)?.reshape(&[n, t])
    }

    pub fn infer(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        softmax(&self.scores(h)?, 1)
    }

    pub fn forward(&mut self, h: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, t, d) = frame_dims(h, "attention")?;
        let flat = h.clone().reshape(&[n * t, d])?;
        let act = tanh(&self.fc1.forward(&flat, mode)?);
        let e = self.fc2.forward(&act, mode)?.reshape(&[n, t])?;
        let alpha = softmax(&e, 1)?;
        self.cache = Some(AttentionCache {
            act,
            alpha: alpha.clone(),
        });
        Ok(alpha)
    }

    pub fn backward(&mut self, grad_alpha: &Tensor<T>) -> Result<Tensor<T>> {
        let AttentionCache { act, alpha } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("attention: backward without forward".into()))?;
        let (n, t) = (alpha.shape()[0], alpha.shape()[1]);
        let ge = softmax_backward(&alpha, grad_alpha, 1)?.reshape(&[n * t, 1])?;
        let gact = self.fc2.backward(&ge)?;
        let gz = tanh_backward(&act, &gact)?;
        let gh = self.fc1.backward(&gz)?;
        let d = gh.shape()[1];
        gh.reshape(&[n, t, d])
    }
}

impl<T: Scalar> Module<T> for AttentionBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.fc1.visit(&scoped(prefix, "fc1"), v);
        self.fc2.visit(&scoped(prefix, "fc2"), v);
    }
}

/// Frame weights `α = softmax_t(score(H_t))`, shape `[N, T']`.
pub fn attention_weights<T: Scalar>(h: &Tensor<T>, attention: &AttentionBlock<T>) -> Result<Tensor<T>> {
    attention.infer(h)
}

/// `α_t = 1/T'` for every frame.
pub fn uniform_weights<T: Scalar>(n: usize, t: usize) -> Tensor<T> {
    Tensor::full(&[n, t], T::one() / T::lit(t as f64))
}

fn check_weights<T: Scalar>(h: &Tensor<T>, alpha: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, t, d) = frame_dims(h, "weighted_stats")?;
    if alpha.shape() != [n, t] {
        return Err(Error::dim("weighted_stats", h.shape(), alpha.shape()));
    }
    let tol = 1e-6_f64.max(4.0 * T::epsilon().as_f64() * t as f64);
    for (i, row) in alpha.data().chunks(t).enumerate() {
        let total = row.iter().fold(T::zero(), |a, &v| a + v).as_f64();
        if (total - 1.0).abs() > tol {
            return Err(Error::Contract(format!(
                "attention weights of utterance {i} sum to {total}, not 1"
            )));
        }
    }
    Ok((n, t, d))
}

/// `u = [μ, σ]` with `μ = Σ_t α_t H_t` and `σ = sqrt(max(Σ_t α_t H_t² − μ², floor))`.
pub fn weighted_stats<T: Scalar>(h: &Tensor<T>, alpha: &Tensor<T>, var_floor: f64) -> Result<Tensor<T>> {
    let (n, t, d) = check_weights(h, alpha)?;
    let floor = T::lit(var_floor);
    let mut out = vec![T::zero(); n * 2 * d];
    for b in 0..n {
        let (mu, rest) = out[b * 2 * d..(b + 1) * 2 * d].split_at_mut(d);
        let mut m2 = vec![T::zero(); d];
        for ti in 0..t {
            let a = alpha.data()[b * t + ti];
            let row = &h.data()[(b * t + ti) * d..(b * t + ti + 1) * d];
            for ((m, s), &x) in mu.iter_mut().zip(m2.iter_mut()).zip(row) {
                *m += a * x;
                *s += a * x * x;
            }
        }
        for ((sigma, &m), &s) in rest.iter_mut().zip(mu.iter()).zip(&m2) {
            *sigma = (s - m * m).max(floor).sqrt();
        }
    }
    let u = Tensor::new(&[n, 2 * d], out)?;
    u.ensure_finite("weighted_stats")?;
    Ok(u)
}

/// Vector–Jacobian products of [`weighted_stats`]: `(grad_h, grad_alpha)`.
///
/// Where the variance floor is active the σ component is constant.
pub fn weighted_stats_backward<T: Scalar>(
    h: &Tensor<T>,
    alpha: &Tensor<T>,
    u: &Tensor<T>,
    grad_u: &Tensor<T>,
    var_floor: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, t, d) = check_weights(h, alpha)?;
    if u.shape() != [n, 2 * d] || grad_u.shape() != [n, 2 * d] {
        return Err(Error::dim("weighted_stats backward", grad_u.shape(), &[n, 2 * d]));
    }
    let floor = T::lit(var_floor);
    let two = T::lit(2.0);
    let mut gh = vec![T::zero(); n * t * d];
    let mut ga = vec![T::zero(); n * t];
    for b in 0..n {
        let (mu, sigma) = u.data()[b * 2 * d..(b + 1) * 2 * d].split_at(d);
        let (gmu, gsig) = grad_u.data()[b * 2 * d..(b + 1) * 2 * d].split_at(d);
        let mut m2 = vec![T::zero(); d];
        for ti in 0..t {
            let a = alpha.data()[b * t + ti];
            let row = &h.data()[(b * t + ti) * d..(b * t + ti + 1) * d];
            for (s, &x) in m2.iter_mut().zip(row) {
                *s += a * x * x;
            }
        }
        // dL/dv for the variance v = Σαh² − μ², zero where floored
        let gv: Vec<T> = (0..d)
            .map(|j| {
                if m2[j] - mu[j] * mu[j] > floor {
                    gsig[j] / (two * sigma[j])
                } else {
                    T::zero()
                }
            })
            .collect();
        for ti in 0..t {
            let a = alpha.data()[b * t + ti];
            let row = &h.data()[(b * t + ti) * d..(b * t + ti + 1) * d];
            let grow = &mut gh[(b * t + ti) * d..(b * t + ti + 1) * d];
            let mut acc = T::zero();
            for j in 0..d {
                let x = row[j];
                grow[j] = a * (gmu[j] + gv[j] * two * (x - mu[j]));
                acc += gmu[j] * x + gv[j] * (x * x - two * mu[j] * x);
            }
            ga[b * t + ti] = acc;
        }
    }
    Ok((Tensor::new(h.shape(), gh)?, Tensor::new(alpha.shape(), ga)?))
}

/// `FC(2D→B) → ReLU → FC(B→128)`.
#[derive(Clone, Debug)]
pub struct EmbeddingHead<T> {
    pub bottleneck: Linear<T>,
    pub projection: Linear<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> EmbeddingHead<T> {
    pub fn new(input_dim: usize, bottleneck: usize, rng: &mut impl Rng) -> Self {
        Self {
            bottleneck: Linear::new(input_dim, bottleneck, rng),
            projection: Linear::new(bottleneck, EMBEDDING_DIM, rng),
            cache: None,
        }
    }

    pub fn infer(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.projection.infer(&relu(&self.bottleneck.infer(u)?))
    }

    pub fn forward(&mut self, u: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let z = self.bottleneck.forward(u, mode)?;
        let y = self.projection.forward(&relu(&z), mode)?;
        self.cache = Some(z);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self
            .cache
            .take()
            .ok_or_else(|| Error::State("embedding head: backward without forward".into()))?;
        let g = self.projection.backward(grad)?;
        self.bottleneck.backward(&relu_backward(&z, &g)?)
    }
}

impl<T: Scalar> Module<T> for EmbeddingHead<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.bottleneck.visit(&scoped(prefix, "bottleneck"), v);
        self.projection.visit(&scoped(prefix, "projection"), v);
    }
}

#[derive(Clone, Debug)]
struct EncoderCache<T> {
    h: Tensor<T>,
    alpha: Tensor<T>,
    u: Tensor<T>,
    variant: Variant,
}

/// The full speaker encoder: frame-level extractor, attention, weighted
/// statistics pooling and embedding head.
///
/// The `Resnet` variant bypasses every SE block and pools with uniform weights.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder<T> {
    pub extractor: FrameLevelExtractor<T>,
    pub attention: AttentionBlock<T>,
    pub head: EmbeddingHead<T>,
    cache: Option<EncoderCache<T>>,
}

impl<T: Scalar> SpeakerEncoder<T> {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let extractor = FrameLevelExtractor::new(config, rng)?;
        let d = config.feature_dim();
        Ok(Self {
            extractor,
            attention: AttentionBlock::new(d, config.attention_dim, rng),
            head: EmbeddingHead::new(2 * d, config.bottleneck, rng),
            cache: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.extractor.config()
    }

    pub fn variant(&self) -> Variant {
        self.config().variant
    }

    fn pool_weights(&self, h: &Tensor<T>, variant: Variant) -> Result<Tensor<T>> {
        if variant.uses_attention() {
            self.attention.infer(h)
        } else {
            Ok(uniform_weights(h.shape()[0], h.shape()[1]))
        }
    }

    /// `[N, 1, F, T] → [N, 128]` with the configured variant.
    pub fn infer(&self, mel: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_variant(mel, self.variant())
    }

    pub fn infer_variant(&self, mel: &Tensor<T>, variant: Variant) -> Result<Tensor<T>> {
        let h = self.extractor.infer(mel, variant)?;
        let alpha = self.pool_weights(&h, variant)?;
        let u = weighted_stats(&h, &alpha, self.config().var_floor)?;
        self.head.infer(&u)
    }

    pub fn forward(&mut self, mel: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let variant = self.variant();
        let h = self.extractor.forward(mel, variant, mode)?;
        let alpha = if variant.uses_attention() {
            self.attention.forward(&h, mode)?
        } else {
            uniform_weights(h.shape()[0], h.shape()[1])
        };
        let u = weighted_stats(&h, &alpha, self.config().var_floor)?;
        let e = self.head.forward(&u, mode)?;
        self.cache = Some(EncoderCache { h, alpha, u, variant });
        Ok(e)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let EncoderCache { h, alpha, u, variant } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("speaker encoder: backward without forward".into()))?;
        let gu = self.head.backward(grad)?;
        let (mut gh, ga) = weighted_stats_backward(&h, &alpha, &u, &gu, self.config().var_floor)?;
        if variant.uses_attention() {
            gh.add_assign(&self.attention.backward(&ga)?)?;
        }
        self.extractor.backward(&gh)
    }

    /// Embedding of one utterance with the configured variant.
    pub fn embed(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        self.embed_variant(mel, self.variant())
    }

    pub fn embed_variant(&self, mel: &MelSpectrogram, variant: Variant) -> Result<SpeakerEmbedding> {
        let e = self.infer_variant(&mel.to_input::<T>()?, variant)?;
        SpeakerEmbedding::new(e.data().iter().map(|v| v.as_f64()).collect())
    }
}

impl<T: Scalar> Module<T> for SpeakerEncoder<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.extractor.visit(&scoped(prefix, "extractor"), v);
        self.attention.visit(&scoped(prefix, "attention"), v);
        self.head.visit(&scoped(prefix, "head"), v);
    }
}

/// A finite 128-dimensional speaker embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::dim("speaker embedding", &[values.len()], &[EMBEDDING_DIM]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "speaker embedding" });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &Self) -> Result<f64> {
        crate::eval::cosine(&self.0, &other.0)
    }
}

/// One line of an embedding export: an utterance id followed by 128 values.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: SpeakerEmbedding,
}

impl EmbeddingRecord {
    pub fn to_line(&self) -> String {
        let mut line = self.id.clone();
        for v in self.embedding.as_slice() {
            write!(line, " {v:.16e}").expect("write to string");
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse {
            file: "embedding record".into(),
            detail,
        };
        let mut fields = line.split_whitespace();
        let id = fields.next().ok_or_else(|| bad("empty line".into()))?.to_string();
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{id}: {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != EMBEDDING_DIM {
            return Err(bad(format!("{id}: expected {EMBEDDING_DIM} values, found {}", values.len())));
        }
        Ok(Self {
            id,
            embedding: SpeakerEmbedding::new(values)?,
        })
    }
}

pub fn write_records(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(EmbeddingRecord::parse_line)
        .collect()
}
