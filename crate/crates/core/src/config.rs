//! Run configuration: a TOML document with `frontend`, `encoder`, `vc`,
//! `train` and `eval` sections. Unknown keys are rejected and every value is
//! range-checked by [`RunConfig::validate`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Speaker-encoder variant: the full SE + attentive-pooling encoder, or the
/// plain ResNet ablation (SE disabled, unweighted statistics pooling).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ddse,
    Resnet,
}

impl Variant {
    pub fn uses_se(self) -> bool {
        matches!(self, Variant::Ddse)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::Ddse)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ddse => "ddse",
            Variant::Resnet => "resnet",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddse" => Ok(Variant::Ddse),
            "resnet" => Ok(Variant::Resnet),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Layer order of the stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemOrder {
    ConvReluBn,
    ConvBnRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 256,
            n_fft: 1024,
            win_length: 800,
            hop_length: 200,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

/// Speaker-encoder architecture.
///
/// `channels[0]` is the stem width; each further entry is the output width of
/// one ResNet-SE block. The first block keeps resolution, later blocks halve
/// both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub channels: Vec<usize>,
    pub reduction: usize,
    pub variant: Variant,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_order: StemOrder,
    pub attention_dim: usize,
    pub bottleneck: usize,
    pub var_floor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 256,
            channels: vec![16, 16, 32, 64, 64],
            reduction: 8,
            variant: Variant::Ddse,
            stem_kernel: 3,
            stem_stride: 1,
            stem_order: StemOrder::ConvReluBn,
            attention_dim: 128,
            bottleneck: 256,
            var_floor: 1e-8,
        }
    }
}

impl EncoderConfig {
    /// The reduced-width schedule used for desk-scale joint training.
    pub fn toy() -> Self {
        Self {
            channels: vec![8, 8, 8, 16, 16],
            ..Self::default()
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len() - 1
    }

    /// Combined stride of the stem and all blocks along each axis.
    pub fn total_stride(&self) -> usize {
        self.stem_stride << self.num_blocks().saturating_sub(1)
    }

    /// Frequency extent after the frame-level stack.
    pub fn out_bands(&self) -> usize {
        let mut f = self.n_mels.div_ceil(self.stem_stride);
        for _ in 1..self.num_blocks() {
            f = f.div_ceil(2);
        }
        f
    }

    /// Time extent after the frame-level stack for `frames` input frames.
    pub fn out_frames(&self, frames: usize) -> usize {
        let mut t = frames.div_ceil(self.stem_stride);
        for _ in 1..self.num_blocks() {
            t = t.div_ceil(2);
        }
        t
    }

    /// Per-frame feature width after flattening channels × bands.
    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.out_bands()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("encoder: {msg}")));
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return bad(format!("channels must list a stem width and >= 1 block width, got {:?}", self.channels));
        }
        if self.reduction == 0 {
            return bad("reduction ratio must be positive".into());
        }
        if let Some(c) = self.channels[1..].iter().find(|&&c| c % self.reduction != 0) {
            return bad(format!("block width {c} is not divisible by reduction ratio {}", self.reduction));
        }
        if self.n_mels == 0 || self.stem_stride == 0 || self.stem_kernel.is_multiple_of(2) {
            return bad("n_mels and stem_stride must be positive and stem_kernel odd".into());
        }
        if self.attention_dim == 0 || self.bottleneck == 0 {
            return bad("attention_dim and bottleneck must be positive".into());
        }
        if !(self.var_floor > 0.0) {
            return bad("var_floor must be positive".into());
        }
        Ok(())
    }
}

/// Reconstruction loss of the joint VC training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Content encoder / decoder sizing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcConfig {
    pub content_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub norm_eps: f64,
}

impl Default for VcConfig {
    fn default() -> Self {
        Self {
            content_dim: 64,
            hidden: 64,
            kernel: 5,
            norm_eps: 1e-8,
        }
    }
}

impl VcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_dim == 0 || self.hidden == 0 || self.kernel.is_multiple_of(2) || !(self.norm_eps > 0.0) {
            return Err(Error::Config(
                "vc: content_dim and hidden must be positive, kernel odd, norm_eps positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub loss: LossKind,
    pub recon_weight: f64,
    pub speakers: usize,
    pub utterances_per_speaker: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            steps: 2000,
            batch_size: 4,
            crop_frames: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            grad_clip: 5.0,
            loss: LossKind::L1,
            recon_weight: 1.0,
            speakers: 8,
            utterances_per_speaker: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("train: {msg}")));
        if self.batch_size == 0 || self.crop_frames == 0 {
            return bad("batch_size and crop_frames must be positive");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.recon_weight > 0.0) {
            return bad("lr, grad_clip and recon_weight must be positive");
        }
        if self.speakers < 2 || self.utterances_per_speaker == 0 {
            return bad("need at least 2 speakers and 1 utterance each");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_seed: u64,
    pub heldout_utterances: usize,
    pub conversion_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_seed: 99,
            heldout_utterances: 10,
            conversion_trials: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub vc: VcConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// The desk-scale toy training preset.
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::toy(),
            vc: VcConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).expect("config serializes");
        overlay(&mut base, user);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.frontend;
        let defaults = FrontendConfig::default();
        if f.sample_rate != defaults.sample_rate
            || f.n_fft != defaults.n_fft
            || f.win_length != defaults.win_length
            || f.hop_length != defaults.hop_length
        {
            return Err(Error::Config(
                "frontend: only 16 kHz audio with 800/200-sample framing and a 1024-point FFT is supported".into(),
            ));
        }
        if f.n_mels == 0 || !(f.f_min >= 0.0 && f.f_max > f.f_min && f.f_max <= f.sample_rate as f64 / 2.0) {
            return Err(Error::Config("frontend: invalid mel band layout".into()));
        }
        if !(f.log_floor > 0.0) {
            return Err(Error::Config("frontend: log_floor must be positive".into()));
        }
        if self.encoder.n_mels != f.n_mels {
            return Err(Error::Config(format!(
                "encoder.n_mels ({}) must equal frontend.n_mels ({})",
                self.encoder.n_mels, f.n_mels
            )));
        }
        self.encoder.validate()?;
        self.vc.validate()?;
        self.train.validate()?;
        if self.train.crop_frames < self.encoder.total_stride() {
            return Err(Error::Config("train.crop_frames is shorter than the encoder's total stride".into()));
        }
        if self.eval.heldout_utterances < 2 || self.eval.conversion_trials == 0 {
            return Err(Error::Config("eval: need >= 2 held-out utterances and >= 1 trial".into()));
        }
        Ok(())
    }
}

/// Keys present in `user` replace those in `base`; tables merge recursively.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Hex SHA-256 over the architecture-defining sections (encoder and vc).
pub fn architecture_hash(encoder: &EncoderConfig, vc: &VcConfig) -> String {
    #[derive(Serialize)]
    struct Arch<'a> {
        encoder: &'a EncoderConfig,
        vc: &'a VcConfig,
    }
    let text = toml::to_string(&Arch { encoder, vc }).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
