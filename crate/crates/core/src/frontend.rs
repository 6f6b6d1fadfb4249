//! WAV ingestion and log-mel features: periodic Hann window, zero-padded
//! power spectrum, HTK triangular filterbank, natural log with a floor.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::config::FrontendConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mono audio at 16 kHz, samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

pub const SAMPLE_RATE: u32 = 16_000;

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Format {
                file: "<memory>".into(),
                field: "sample_rate",
                detail: format!("{sample_rate} Hz, expected {SAMPLE_RATE} Hz"),
            });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "waveform" });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a 16-bit PCM mono 16 kHz WAV file, scaling samples by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let file = path.display().to_string();
    let parse = |detail: String| Error::Parse {
        file: file.clone(),
        detail,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => Error::io(path, io),
        other => parse(other.to_string()),
    })?;
    let spec = reader.spec();
    let format = |field: &'static str, detail: String| Error::Format {
        file: file.clone(),
        field,
        detail,
    };
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(format("sample_format", "floating-point samples, expected integer PCM".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(format("bits_per_sample", format!("{}, expected 16", spec.bits_per_sample)));
    }
    if spec.channels != 1 {
        return Err(format("channels", format!("{}, expected 1", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format("sample_rate", format!("{} Hz, expected {SAMPLE_RATE} Hz", spec.sample_rate)));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse(e.to_string()))?;
    if samples.len() != expected {
        return Err(parse(format!("data chunk holds {} of {expected} samples", samples.len())));
    }
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Writes 16-bit PCM mono, rounding `x · 32768` and clamping to the i16 range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Parse {
            file: path.display().to_string(),
            detail: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(q).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

/// Power spectrum of a real frame of length `n`: `n/2 + 1` bins of `Re² + Im²`.
pub struct PowerSpectrum {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl PowerSpectrum {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            fft: FftPlanner::new().plan_fft_forward(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn compute(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.n {
            return Err(Error::dim("dft_power", &[frame.len()], &[self.n]));
        }
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[..self.n / 2 + 1].iter().map(|c| c.norm_sqr()).collect())
    }
}

pub const N_FFT: usize = 1024;

/// 513 power bins of a 1024-sample frame.
pub fn dft_power(frame: &[f64]) -> Result<Vec<f64>> {
    if frame.len() != N_FFT {
        return Err(Error::dim("dft_power", &[frame.len()], &[N_FFT]));
    }
    PowerSpectrum::new(N_FFT).compute(frame)
}

/// Periodic Hann window: `w[n] = 0.5 − 0.5·cos(2πn/N)`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Unit-peak triangular filters on the HTK mel scale, `[n_mels][n_fft/2 + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    edges_hz: Vec<f64>,
    bin_hz: f64,
}

impl MelFilterbank {
    pub fn htk(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let weights = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            edges_hz,
            bin_hz,
        }
    }

    pub fn from_config(cfg: &FrontendConfig) -> Self {
        Self::htk(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max)
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Center frequency of each filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    pub fn bin_hz(&self) -> f64 {
        self.bin_hz
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Log-mel features, `frames × bands`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: usize,
    bands: usize,
    data: Vec<f64>,
    pub hop_length: usize,
    pub win_length: usize,
}

impl MelSpectrogram {
    pub fn new(frames: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || bands == 0 || data.len() != frames * bands {
            return Err(Error::Shape {
                shape: vec![frames, bands],
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "mel spectrogram" });
        }
        let d = FrontendConfig::default();
        Ok(Self {
            frames,
            bands,
            data,
            hop_length: d.hop_length,
            win_length: d.win_length,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bands..(t + 1) * self.bands]
    }

    /// Frames `start..start + len` as a new spectrogram.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::InputLength {
                needed: start + len,
                got: self.frames,
                unit: "frames",
            });
        }
        Self::new(len, self.bands, self.data[start * self.bands..(start + len) * self.bands].to_vec())
    }

    /// Encoder input layout `[1, 1, bands, frames]`.
    pub fn to_input<T: Scalar>(&self) -> Result<Tensor<T>> {
        let (f, b) = (self.frames, self.bands);
        Tensor::new(
            &[1, 1, b, f],
            (0..b * f).map(|i| T::lit(self.data[(i % f) * b + i / f])).collect(),
        )
    }

    /// Inverse of [`to_input`](Self::to_input) for a `[1, 1, bands, frames]` or `[1, bands, frames]` tensor.
    pub fn from_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Self> {
        let (b, f) = match *x.shape() {
            [1, 1, b, f] | [1, b, f] => (b, f),
            _ => return Err(Error::dim("mel from tensor", x.shape(), &[1, 1, 0, 0])),
        };
        let d = x.data();
        Self::new(f, b, (0..f * b).map(|i| d[(i % b) * f + i / b].as_f64()).collect())
    }

    /// Writes the cache format: `"MELF"`, u32 frames, u32 bands, u32 0, then f32 LE values.
    pub fn write_melf(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut header = Vec::with_capacity(16);
        header.extend_from_slice(b"MELF");
        header.extend_from_slice(&(self.frames as u32).to_le_bytes());
        header.extend_from_slice(&(self.bands as u32).to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        w.write_all(&header).map_err(|e| Error::io(path, e))?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_melf(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let parse = |detail: String| Error::Parse {
            file: file.clone(),
            detail,
        };
        if bytes.len() < 16 {
            return Err(parse(format!("{} bytes is shorter than the 16-byte header", bytes.len())));
        }
        if &bytes[..4] != b"MELF" {
            return Err(Error::Format {
                file: file.clone(),
                field: "magic",
                detail: format!("{:?}, expected \"MELF\"", String::from_utf8_lossy(&bytes[..4])),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (frames, bands) = (word(4), word(8));
        let body = &bytes[16..];
        if body.len() != frames * bands * 4 {
            return Err(parse(format!(
                "header announces {frames}x{bands} values but {} bytes follow",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(frames, bands, data)
    }
}

/// The configured feature pipeline with its window, FFT plan and filterbank.
pub struct MelFrontend {
    config: FrontendConfig,
    window: Vec<f64>,
    spectrum: PowerSpectrum,
    filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(config: &FrontendConfig) -> Self {
        Self {
            config: config.clone(),
            window: hann_periodic(config.win_length),
            spectrum: PowerSpectrum::new(config.n_fft),
            filterbank: MelFilterbank::from_config(config),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Number of frames for `len` samples: `1 + (len − win) / hop`.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.config.win_length).then(|| 1 + (len - self.config.win_length) / self.config.hop_length)
    }

    pub fn process(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(Error::Format {
                file: "<memory>".into(),
                field: "sample_rate",
                detail: format!("{} Hz, expected {} Hz", wave.sample_rate, self.config.sample_rate),
            });
        }
        let frames = self.frame_count(wave.len()).ok_or(Error::InputLength {
            needed: self.config.win_length,
            got: wave.len(),
            unit: "samples",
        })?;
        let (hop, win, n_fft) = (self.config.hop_length, self.config.win_length, self.config.n_fft);
        let floor = self.config.log_floor;
        let mut data = Vec::with_capacity(frames * self.filterbank.n_mels());
        let mut buf = vec![0.0; n_fft];
        for t in 0..frames {
            let seg = &wave.samples[t * hop..t * hop + win];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = x * w;
            }
            let power = self.spectrum.compute(&buf)?;
            data.extend(self.filterbank.apply(&power).into_iter().map(|e| e.max(floor).ln()));
        }
        let mut mel = MelSpectrogram::new(frames, self.filterbank.n_mels(), data)?;
        mel.hop_length = hop;
        mel.win_length = win;
        Ok(mel)
    }
}

/// Log-mel spectrogram with the default 16 kHz / 256-band configuration.
pub fn melspec(wave: &Waveform) -> Result<MelSpectrogram> {
    MelFrontend::new(&FrontendConfig::default()).process(wave)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_arithmetic() {
        let fe = MelFrontend::new(&FrontendConfig::default());
        assert_eq!(fe.frame_count(16_000), Some(77));
        assert_eq!(fe.frame_count(800), Some(1));
        assert_eq!(fe.frame_count(999), Some(1));
        assert_eq!(fe.frame_count(1000), Some(2));
        assert_eq!(fe.frame_count(799), None);
    }

    #[test]
    fn short_audio_is_length_error() {
        let w = Waveform::new(vec![0.0; 799], SAMPLE_RATE).unwrap();
        assert!(matches!(melspec(&w), Err(Error::InputLength { needed: 800, got: 799, .. })));
    }

    #[test]
    fn dc_frame_power() {
        let p = dft_power(&[0.25; N_FFT]).unwrap();
        assert!((p[0] - (1024.0 * 0.25f64).powi(2)).abs() < 1e-9);
        assert!(p[1..].iter().all(|&v| v < 1e-18));
        assert!(dft_power(&[0.0; 800]).is_err());
    }

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn interior_bins_are_covered() {
        let fb = MelFilterbank::from_config(&FrontendConfig::default());
        assert_eq!((fb.n_mels(), fb.n_bins()), (256, 513));
        for k in 1..512 {
            let total: f64 = fb.weights().iter().map(|w| w[k]).sum();
            assert!(total > 0.0, "bin {k} uncovered");
        }
        assert!(fb.weights().iter().flatten().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn mel_tensor_layout_round_trip() {
        let m = MelSpectrogram::new(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let x = m.to_input::<f64>().unwrap();
        assert_eq!(x.shape(), &[1, 1, 2, 3]);
        assert_eq!(x.data(), &[1., 3., 5., 2., 4., 6.]);
        assert_eq!(MelSpectrogram::from_tensor(&x).unwrap(), m);
    }
}
