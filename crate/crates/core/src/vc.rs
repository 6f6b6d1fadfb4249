//! Toy one-shot voice conversion: content encoder, embedding-conditioned
//! decoder and the speaker encoder, trained jointly by reconstruction.
//!
//! Frame sequences use the layout `[N, C, 1, T]` so that the time convolutions
//! are height-1 2-D convolutions. A mel batch `[N, 1, F, T]` has the same
//! memory layout as `[N, F, 1, T]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossKind, OptimizerKind, RunConfig, VcConfig};
use crate::dataset::{ToySpeakerDataset, Utterance};
use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::layers::{for_each_param, scoped, Adam, Conv2d, Linear, Mode, Module, Optimizer, Sgd, Visitor};
use crate::pooling::{SpeakerEmbedding, SpeakerEncoder, EMBEDDING_DIM};
use crate::tensor::{relu, relu_backward, Scalar, Tensor};

fn seq_dims<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, 1, t] => Ok((n, c, t)),
        _ => Err(Error::dim(op, x.shape(), &[0, 0, 1, 0])),
    }
}

/// Per-utterance, per-channel normalization over time without affine terms.
#[derive(Clone, Debug)]
pub struct InstanceNorm<T> {
    pub eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(eps: f64) -> Self {
        Self { eps, cache: None }
    }

    fn normalize(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let (_, _, t) = seq_dims(x, "instance_norm")?;
        let tf = T::lit(t as f64);
        let eps = T::lit(self.eps);
        let mut y = x.clone();
        let mut inv = Vec::with_capacity(x.len() / t);
        for row in y.data_mut().chunks_mut(t) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / tf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / tf;
            let k = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * k);
            inv.push(k);
        }
        y.ensure_finite("instance_norm")?;
        Ok((y, inv))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.normalize(x)?.0)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, inv) = self.normalize(x)?;
        self.cache = Some((y.clone(), inv));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, inv) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("instance norm: backward without forward".into()))?;
        if grad.shape() != y.shape() {
            return Err(Error::dim("instance_norm backward", grad.shape(), y.shape()));
        }
        let t = y.shape()[3];
        let tf = T::lit(t as f64);
        let mut gx = grad.clone();
        for ((g, yr), &k) in gx.data_mut().chunks_mut(t).zip(y.data().chunks(t)).zip(&inv) {
            let mg = g.iter().fold(T::zero(), |a, &v| a + v) / tf;
            let mgy = g.iter().zip(yr).fold(T::zero(), |a, (&v, &h)| a + v * h) / tf;
            for (gv, &h) in g.iter_mut().zip(yr) {
                *gv = k * (*gv - mg - h * mgy);
            }
        }
        Ok(gx)
    }
}

/// Three time convolutions, each followed by instance normalization; ReLU
/// between layers. Maps `[N, F, 1, T]` to content codes `[N, content_dim, 1, T]`.
#[derive(Clone, Debug)]
pub struct ContentEncoder<T> {
    pub convs: Vec<Conv2d<T>>,
    norms: Vec<InstanceNorm<T>>,
    cache: Vec<Tensor<T>>,
}

impl<T: Scalar> ContentEncoder<T> {
    pub fn new(bands: usize, cfg: &VcConfig, rng: &mut impl Rng) -> Self {
        let widths = [bands, cfg.hidden, cfg.hidden, cfg.content_dim];
        Self {
            convs: widths
                .windows(2)
                .map(|w| Conv2d::new(w[0], w[1], (1, cfg.kernel), (1, 1), rng))
                .collect(),
            norms: (0..3).map(|_| InstanceNorm::new(cfg.norm_eps)).collect(),
            cache: Vec::new(),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = n.infer(&c.infer(&h)?)?;
            if i + 1 < self.convs.len() {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.cache.clear();
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, (c, n)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            h = n.forward(&c.forward(&h, mode)?)?;
            if i < last {
                self.cache.push(h.clone());
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for i in (0..self.convs.len()).rev() {
            if i + 1 < self.convs.len() {
                let pre = self
                    .cache
                    .pop()
                    .ok_or_else(|| Error::State("content encoder: backward without forward".into()))?;
                g = relu_backward(&pre, &g)?;
            }
            g = self.norms[i].backward(&g)?;
            g = self.convs[i].backward(&g)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> Module<T> for ContentEncoder<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&scoped(prefix, &format!("conv{i}")), v);
        }
    }
}

#[derive(Clone, Debug)]
struct CondCache<T> {
    xhat: Tensor<T>,
    scale: Tensor<T>,
    pre: Option<Tensor<T>>,
}

/// `conv → instance norm → x̂ · (1 + γ(e)) + β(e)`, then ReLU unless it is the output layer.
#[derive(Clone, Debug)]
pub struct ConditionedLayer<T> {
    pub conv: Conv2d<T>,
    pub gamma: Linear<T>,
    pub beta: Linear<T>,
    norm: InstanceNorm<T>,
    activate: bool,
    cache: Option<CondCache<T>>,
}

fn channel_affine<T: Scalar>(xhat: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, t) = seq_dims(xhat, "adaptive affine")?;
    if scale.shape() != [n, c] || shift.shape() != [n, c] {
        return Err(Error::dim("adaptive affine", xhat.shape(), scale.shape()));
    }
    let mut y = xhat.clone();
    for ((row, &s), &b) in y.data_mut().chunks_mut(t).zip(scale.data()).zip(shift.data()) {
        row.iter_mut().for_each(|v| *v = *v * s + b);
    }
    Ok(y)
}

impl<T: Scalar> ConditionedLayer<T> {
    pub fn new(in_ch: usize, out_ch: usize, cfg: &VcConfig, activate: bool, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, (1, cfg.kernel), (1, 1), rng),
            gamma: Linear::new(EMBEDDING_DIM, out_ch, rng),
            beta: Linear::new(EMBEDDING_DIM, out_ch, rng),
            norm: InstanceNorm::new(cfg.norm_eps),
            activate,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
        let xhat = self.norm.infer(&self.conv.infer(x)?)?;
        let scale = self.gamma.infer(e)?.map(|g| T::one() + g);
        let y = channel_affine(&xhat, &scale, &self.beta.infer(e)?)?;
        Ok(if self.activate { relu(&y) } else { y })
    }

    pub fn forward(&mut self, x: &Tensor<T>, e: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let xhat = self.norm.forward(&self.conv.forward(x, mode)?)?;
        let scale = self.gamma.forward(e, mode)?.map(|g| T::one() + g);
        let y = channel_affine(&xhat, &scale, &self.beta.forward(e, mode)?)?;
        let (out, pre) = if self.activate { (relu(&y), Some(y)) } else { (y, None) };
        self.cache = Some(CondCache { xhat, scale, pre });
        Ok(out)
    }

    /// Returns `(grad_x, grad_e)`.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let CondCache { xhat, scale, pre } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("decoder layer: backward without forward".into()))?;
        let g = match &pre {
            Some(p) => relu_backward(p, grad)?,
            None => grad.clone(),
        };
        let (n, c, t) = seq_dims(&xhat, "decoder layer backward")?;
        let mut g_scale = Tensor::zeros(&[n, c]);
        let mut g_shift = Tensor::zeros(&[n, c]);
        let mut g_xhat = g.clone();
        for (i, (gr, xr)) in g_xhat.data_mut().chunks_mut(t).zip(xhat.data().chunks(t)).enumerate() {
            let (mut gs, mut gb) = (T::zero(), T::zero());
            for (gv, &h) in gr.iter().zip(xr) {
                gs += *gv * h;
                gb += *gv;
            }
            g_scale.data_mut()[i] = gs;
            g_shift.data_mut()[i] = gb;
            let s = scale.data()[i];
            gr.iter_mut().for_each(|v| *v *= s);
        }
        let mut ge = self.gamma.backward(&g_scale)?;
        ge.add_assign(&self.beta.backward(&g_shift)?)?;
        let gx = self.conv.backward(&self.norm.backward(&g_xhat)?)?;
        Ok((gx, ge))
    }
}

impl<T: Scalar> Module<T> for ConditionedLayer<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(&scoped(prefix, "conv"), v);
        self.gamma.visit(&scoped(prefix, "gamma"), v);
        self.beta.visit(&scoped(prefix, "beta"), v);
    }
}

/// Three embedding-conditioned layers mapping content codes back to `bands` channels.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub layers: Vec<ConditionedLayer<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(bands: usize, cfg: &VcConfig, rng: &mut impl Rng) -> Self {
        let widths = [cfg.content_dim, cfg.hidden, cfg.hidden, bands];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConditionedLayer::new(w[0], w[1], cfg, i < 2, rng))
            .collect();
        Self { layers }
    }

    pub fn infer(&self, codes: &Tensor<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = codes.clone();
        for l in &self.layers {
            h = l.infer(&h, e)?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, codes: &Tensor<T>, e: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = codes.clone();
        for l in &mut self.layers {
            h = l.forward(&h, e, mode)?;
        }
        Ok(h)
    }

    /// Returns `(grad_codes, grad_e)`.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = grad.clone();
        let mut ge: Option<Tensor<T>> = None;
        for l in self.layers.iter_mut().rev() {
            let (gx, gel) = l.backward(&g)?;
            g = gx;
            match &mut ge {
                Some(acc) => acc.add_assign(&gel)?,
                None => ge = Some(gel),
            }
        }
        Ok((g, ge.expect("decoder has layers")))
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&scoped(prefix, &format!("layer{i}")), v);
        }
    }
}

/// Speaker encoder, content encoder and decoder.
#[derive(Clone, Debug)]
pub struct VcModel<T> {
    pub speaker: SpeakerEncoder<T>,
    pub content: ContentEncoder<T>,
    pub decoder: Decoder<T>,
}

fn as_sequence<T: Scalar>(mel: &Tensor<T>) -> Result<Tensor<T>> {
    match *mel.shape() {
        [n, 1, f, t] => mel.clone().reshape(&[n, f, 1, t]),
        _ => Err(Error::dim("vc input", mel.shape(), &[0, 1, 0, 0])),
    }
}

fn as_mel<T: Scalar>(seq: Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, t) = seq_dims(&seq, "vc output")?;
    seq.reshape(&[n, 1, f, t])
}

impl<T: Scalar> VcModel<T> {
    pub fn new(config: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let bands = config.encoder.n_mels;
        Ok(Self {
            speaker: SpeakerEncoder::new(&config.encoder, rng)?,
            content: ContentEncoder::new(bands, &config.vc, rng),
            decoder: Decoder::new(bands, &config.vc, rng),
        })
    }

    /// Model initialization for `config.train.seed`.
    pub fn initialize(config: &RunConfig) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(config.train.seed))
    }

    /// `decoder(content(src), speaker(tgt))` on `[N, 1, F, T]` batches.
    pub fn convert_tensor(&self, src: &Tensor<T>, tgt: &Tensor<T>) -> Result<Tensor<T>> {
        let e = self.speaker.infer(tgt)?;
        if e.shape()[0] != src.shape()[0] {
            return Err(Error::dim("convert", src.shape(), tgt.shape()));
        }
        let codes = self.content.infer(&as_sequence(src)?)?;
        as_mel(self.decoder.infer(&codes, &e)?)
    }

    pub fn convert(&self, src: &MelSpectrogram, tgt: &MelSpectrogram) -> Result<MelSpectrogram> {
        let y = self.convert_tensor(&src.to_input()?, &tgt.to_input()?)?;
        MelSpectrogram::from_tensor(&y)
    }

    pub fn reconstruct(&self, mel: &MelSpectrogram) -> Result<MelSpectrogram> {
        self.convert(mel, mel)
    }

    /// Forward and backward of the reconstruction loss on a `[N, 1, F, T]`
    /// batch. Gradients accumulate into every parameter; returns the loss.
    pub fn accumulate_gradients(&mut self, batch: &Tensor<T>, loss: LossKind, weight: f64) -> Result<f64> {
        let e = self.speaker.forward(batch, Mode::Train)?;
        let codes = self.content.forward(&as_sequence(batch)?, Mode::Train)?;
        let y = as_mel(self.decoder.forward(&codes, &e, Mode::Train)?)?;
        let (value, grad) = reconstruction_loss(&y, batch, loss, weight)?;
        let (g_codes, g_e) = self.decoder.backward(&as_sequence(&grad)?)?;
        self.content.backward(&g_codes)?;
        self.speaker.backward(&g_e)?;
        Ok(value)
    }

    /// Reconstruction loss in eval mode without touching gradients.
    pub fn eval_loss(&self, batch: &Tensor<T>, loss: LossKind) -> Result<f64> {
        let y = self.convert_tensor(batch, batch)?;
        Ok(reconstruction_loss(&y, batch, loss, 1.0)?.0)
    }
}

impl<T: Scalar> Module<T> for VcModel<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.speaker.visit(&scoped(prefix, "speaker"), v);
        self.content.visit(&scoped(prefix, "content"), v);
        self.decoder.visit(&scoped(prefix, "decoder"), v);
    }
}

/// Mean absolute (or squared) error and its gradient with respect to `y`.
pub fn reconstruction_loss<T: Scalar>(
    y: &Tensor<T>,
    target: &Tensor<T>,
    kind: LossKind,
    weight: f64,
) -> Result<(f64, Tensor<T>)> {
    if y.shape() != target.shape() {
        return Err(Error::dim("reconstruction loss", y.shape(), target.shape()));
    }
    let n = T::lit(y.len() as f64);
    let w = T::lit(weight);
    let (value, grad) = match kind {
        LossKind::L1 => {
            let value = y
                .data()
                .iter()
                .zip(target.data())
                .fold(T::zero(), |a, (&p, &q)| a + (p - q).abs());
            let grad = y.zip_map(target, |p, q| {
                let d = p - q;
                if d > T::zero() {
                    w / n
                } else if d < T::zero() {
                    -w / n
                } else {
                    T::zero()
                }
            })?;
            (value, grad)
        }
        LossKind::L2 => {
            let value = y
                .data()
                .iter()
                .zip(target.data())
                .fold(T::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
            let two = T::lit(2.0);
            (value, y.zip_map(target, |p, q| two * w * (p - q) / n)?)
        }
    };
    Ok(((w * value / n).as_f64(), grad))
}

/// Deterministic stream of random training crops.
pub struct CropSampler {
    rng: ChaCha8Rng,
    crop: usize,
    batch: usize,
}

impl CropSampler {
    pub fn new(seed: u64, batch: usize, crop: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { rng, crop, batch }
    }

    /// `[batch, 1, F, crop]` drawn uniformly over utterances and offsets.
    pub fn next<T: Scalar>(&mut self, utterances: &[&MelSpectrogram]) -> Result<Tensor<T>> {
        let bands = utterances[0].bands();
        let mut data = Vec::with_capacity(self.batch * bands * self.crop);
        for _ in 0..self.batch {
            let mel = utterances[self.rng.gen_range(0..utterances.len())];
            if mel.frames() < self.crop {
                return Err(Error::InputLength {
                    needed: self.crop,
                    got: mel.frames(),
                    unit: "frames",
                });
            }
            let start = self.rng.gen_range(0..=mel.frames() - self.crop);
            let x = mel.slice(start, self.crop)?.to_input::<T>()?;
            data.extend_from_slice(x.data());
        }
        Tensor::new(&[self.batch, 1, bands, self.crop], data)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: VcModel<T>,
    /// `(step, loss)` of every optimizer step, computed before the update.
    pub losses: Vec<(usize, f64)>,
}

/// Jointly trains all three networks on random crops of `dataset`.
///
/// The only objective is reconstruction; the speaker encoder learns solely
/// through the decoder's use of its embedding.
pub fn train_joint<T: Scalar>(
    dataset: &ToySpeakerDataset,
    config: &RunConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.num_speakers() < 2 {
        return Err(Error::Config("training needs at least 2 speakers".into()));
    }
    let tc = &config.train;
    let mut model = VcModel::<T>::initialize(config)?;
    let mels: Vec<&MelSpectrogram> = dataset.utterances.iter().map(|u| &u.mel).collect();
    let mut sampler = CropSampler::new(tc.seed, tc.batch_size, tc.crop_frames);
    let clip = Some(tc.grad_clip);
    let mut optimizer: Box<dyn Optimizer<T>> = match tc.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(tc.lr, clip)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: tc.lr, clip }),
    };
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let diverged = |e: Error| Error::Training {
            step,
            reason: e.to_string(),
        };
        let batch = sampler.next::<T>(&mels)?;
        let loss = model
            .accumulate_gradients(&batch, tc.loss, tc.recon_weight)
            .map_err(diverged)?;
        if !loss.is_finite() {
            return Err(diverged(Error::NonFinite { op: "reconstruction loss" }));
        }
        optimizer.step(&mut model).map_err(|e| match e {
            Error::NonFiniteGradient(_) => diverged(e),
            other => other,
        })?;
        losses.push((step, loss));
        on_step(step, loss);
    }
    Ok(TrainOutcome { model, losses })
}

/// Sum of absolute gradient values of every speaker-encoder parameter.
pub fn speaker_gradient_mass<T: Scalar>(model: &mut VcModel<T>) -> f64 {
    let mut total = 0.0;
    for_each_param(&mut model.speaker, |_, p| {
        total += p.grad.data().iter().map(|g| g.as_f64().abs()).sum::<f64>();
    });
    total
}

/// Embeddings of `utterances` grouped by speaker index.
pub fn embeddings_by_speaker<T: Scalar>(
    encoder: &SpeakerEncoder<T>,
    utterances: &[Utterance],
) -> Result<Vec<Vec<SpeakerEmbedding>>> {
    let speakers = utterances.iter().map(|u| u.speaker + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); speakers];
    for u in utterances {
        groups[u.speaker].push(encoder.embed(&u.mel)?);
    }
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionTrial {
    pub source: String,
    pub target: String,
    /// Another utterance of the target speaker.
    pub reference: String,
    pub to_reference: f64,
    pub to_source: f64,
}

impl ConversionTrial {
    pub fn success(&self) -> bool {
        self.to_reference > self.to_source
    }
}

/// Success rate of a batch of conversion trials.
pub fn success_rate(trials: &[ConversionTrial]) -> f64 {
    trials.iter().filter(|t| t.success()).count() as f64 / trials.len().max(1) as f64
}

fn pick(rng: &mut ChaCha8Rng, pool: &[usize], what: &str) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Contract(format!("no utterance available for {what}")));
    }
    Ok(pool[rng.gen_range(0..pool.len())])
}

/// One-shot conversion trials: a source utterance is converted towards a
/// target utterance of another speaker, and the converted embedding is
/// compared with a different utterance of the target speaker and with the
/// source.
pub fn conversion_trials<T: Scalar>(
    model: &VcModel<T>,
    utterances: &[Utterance],
    trials: usize,
    seed: u64,
) -> Result<Vec<ConversionTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..utterances.len()).collect();
    let mut cache: Vec<Option<SpeakerEmbedding>> = vec![None; utterances.len()];
    let mut embed = |i: usize| -> Result<SpeakerEmbedding> {
        if cache[i].is_none() {
            cache[i] = Some(model.speaker.embed(&utterances[i].mel)?);
        }
        Ok(cache[i].clone().expect("filled above"))
    };
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let s = pick(&mut rng, &all, "source")?;
        let others: Vec<usize> = all.iter().copied().filter(|&j| utterances[j].speaker != utterances[s].speaker).collect();
        let t = pick(&mut rng, &others, "target")?;
        let refs: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&j| j != t && utterances[j].speaker == utterances[t].speaker)
            .collect();
        let r = pick(&mut rng, &refs, "reference")?;
        let converted = model.speaker.embed(&model.convert(&utterances[s].mel, &utterances[t].mel)?)?;
        out.push(ConversionTrial {
            source: utterances[s].id.clone(),
            target: utterances[t].id.clone(),
            reference: utterances[r].id.clone(),
            to_reference: converted.cosine(&embed(r)?)?,
            to_source: converted.cosine(&embed(s)?)?,
        });
    }
    Ok(out)
}

/// Mean absolute difference between two spectrograms of equal shape.
pub fn mean_abs_diff(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if (a.frames(), a.bands()) != (b.frames(), b.bands()) {
        return Err(Error::dim(
            "mean_abs_diff",
            &[a.frames(), a.bands()],
            &[b.frames(), b.bands()],
        ));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

/// For each trial, how much the converted output moves when the target
/// utterance is swapped for another utterance of the same speaker, and for
/// an utterance of a different speaker: `(same, different)` pairs.
pub fn target_swap_trials<T: Scalar>(
    model: &VcModel<T>,
    utterances: &[Utterance],
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..utterances.len()).collect();
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let s = pick(&mut rng, &all, "source")?;
        let t = pick(&mut rng, &all, "target")?;
        let same: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&j| j != t && utterances[j].speaker == utterances[t].speaker)
            .collect();
        let diff: Vec<usize> = all.iter().copied().filter(|&j| utterances[j].speaker != utterances[t].speaker).collect();
        let (a, b) = (pick(&mut rng, &same, "same speaker")?, pick(&mut rng, &diff, "other speaker")?);
        let src = &utterances[s].mel;
        let base = model.convert(src, &utterances[t].mel)?;
        out.push((
            mean_abs_diff(&base, &model.convert(src, &utterances[a].mel)?)?,
            mean_abs_diff(&base, &model.convert(src, &utterances[b].mel)?)?,
        ));
    }
    Ok(out)
}
