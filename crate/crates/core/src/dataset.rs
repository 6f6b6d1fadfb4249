//! Synthetic multi-speaker corpus rendered directly as log-mel frames.
//!
//! A speaker is a smooth spectral envelope plus a pitch range; an utterance is
//! a script of phone segments (shared inventory) rendered for one speaker:
//!
//! `x[t, b] = base + envelope[b] + phone(t)[b] + voiced(t) · harmonics(f0(t))[b] + noise`
//!
//! Rendering the same script for another speaker gives a parallel utterance.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frontend::{hz_to_mel, MelSpectrogram};

pub const BANDS: usize = 256;
pub const MIN_FRAMES: usize = 64;
pub const MAX_FRAMES: usize = 256;
const N_PHONES: usize = 12;
const BASE_LEVEL: f64 = -2.0;
const NOISE_STD: f64 = 0.15;
const MIN_ENVELOPE_RMS: f64 = 0.6;
const F_MAX: f64 = 8000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeaker {
    pub envelope: Vec<f64>,
    pub f0_hz: f64,
    /// Pitch group: 0 for the low range, 1 for the high range.
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Phone {
    shape: Vec<f64>,
    voiced: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub phone: usize,
    pub frames: usize,
    pub f0_ratio: f64,
}

/// Speaker-independent content of an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Script {
    pub segments: Vec<Segment>,
    pub noise_seed: u64,
}

impl Script {
    pub fn frames(&self) -> usize {
        self.segments.iter().map(|s| s.frames).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub script: Script,
    pub mel: MelSpectrogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeakerDataset {
    pub seed: u64,
    pub speakers: Vec<ToySpeaker>,
    phones: Vec<Phone>,
    pub utterances: Vec<Utterance>,
}

fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

fn bump(b: f64, center: f64, width: f64) -> f64 {
    (-(b - center) * (b - center) / (2.0 * width * width)).exp()
}

/// Fractional band index of frequency `f` on the HTK mel axis.
fn band_position(f: f64) -> f64 {
    hz_to_mel(f) / hz_to_mel(F_MAX) * (BANDS + 1) as f64 - 1.0
}

fn harmonics(f0: f64) -> Vec<f64> {
    let mut out = vec![0.0; BANDS];
    let mut h = 1;
    while h as f64 * f0 < F_MAX {
        let pos = band_position(h as f64 * f0);
        let gain = 1.5 / (1.0 + 0.05 * h as f64);
        let lo = (pos - 4.0).floor().max(0.0) as usize;
        let hi = ((pos + 4.0).ceil() as usize).min(BANDS - 1);
        for (b, o) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *o += gain * bump(b as f64, pos, 1.0);
        }
        h += 1;
    }
    out.iter_mut().for_each(|v| *v = v.min(2.0));
    out
}

fn random_envelope(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let terms: Vec<(f64, f64)> = (1..=4)
        .map(|j| {
            let a = Normal::new(0.0, 1.2 / j as f64).expect("valid normal").sample(rng);
            (a, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let tilt = rng.gen_range(-1.0..1.0);
    (0..BANDS)
        .map(|b| {
            let x = b as f64 / BANDS as f64;
            tilt * (x - 0.5)
                + terms
                    .iter()
                    .enumerate()
                    .map(|(j, (a, ph))| a * (std::f64::consts::PI * (j + 1) as f64 * x + ph).cos())
                    .sum::<f64>()
        })
        .collect()
}

fn random_phone(rng: &mut ChaCha8Rng) -> Phone {
    let voiced = rng.gen_bool(0.7);
    let mut shape = vec![0.0; BANDS];
    if voiced {
        for _ in 0..3 {
            let c = rng.gen_range(10.0..200.0);
            let w = rng.gen_range(6.0..20.0);
            let a = rng.gen_range(1.0..3.0);
            shape.iter_mut().enumerate().for_each(|(b, s)| *s += a * bump(b as f64, c, w));
        }
    } else {
        let c = rng.gen_range(150.0..250.0);
        let w = rng.gen_range(30.0..60.0);
        let a = rng.gen_range(1.0..2.5);
        shape
            .iter_mut()
            .enumerate()
            .for_each(|(b, s)| *s += a * bump(b as f64, c, w) - 1.0);
    }
    Phone { shape, voiced }
}

impl ToySpeakerDataset {
    /// `k` speakers with `per_speaker` utterances each, fully determined by `seed`.
    pub fn generate(k: usize, per_speaker: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("toy dataset needs at least 2 speakers, got {k}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phones = (0..N_PHONES).map(|_| random_phone(&mut rng)).collect();
        let mut speakers: Vec<ToySpeaker> = Vec::with_capacity(k);
        while speakers.len() < k {
            let envelope = random_envelope(&mut rng);
            if speakers
                .iter()
                .any(|s| rms_distance(&s.envelope, &envelope) < MIN_ENVELOPE_RMS)
            {
                continue;
            }
            let group = speakers.len() % 2;
            let f0_hz = match group {
                0 => rng.gen_range(95.0..140.0),
                _ => rng.gen_range(180.0..250.0),
            };
            speakers.push(ToySpeaker { envelope, f0_hz, group });
        }
        let mut ds = Self {
            seed,
            speakers,
            phones,
            utterances: Vec::new(),
        };
        ds.utterances = ds.sample_utterances(per_speaker, &mut rng, "u")?;
        Ok(ds)
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    fn random_script(&self, rng: &mut ChaCha8Rng) -> Script {
        let target = rng.gen_range(MIN_FRAMES..=MAX_FRAMES);
        let mut segments = Vec::new();
        let mut total = 0;
        while total < target {
            let frames = rng.gen_range(6..=16).min(target - total);
            segments.push(Segment {
                phone: rng.gen_range(0..self.phones.len()),
                frames,
                f0_ratio: rng.gen_range(0.94..1.06),
            });
            total += frames;
        }
        Script {
            segments,
            noise_seed: rng.gen(),
        }
    }

    fn sample_utterances(&self, per_speaker: usize, rng: &mut ChaCha8Rng, tag: &str) -> Result<Vec<Utterance>> {
        let mut out = Vec::with_capacity(self.speakers.len() * per_speaker);
        for s in 0..self.speakers.len() {
            for u in 0..per_speaker {
                let script = self.random_script(rng);
                out.push(Utterance {
                    id: format!("s{s:02}_{tag}{u:03}"),
                    speaker: s,
                    mel: self.render(s, &script)?,
                    script,
                });
            }
        }
        Ok(out)
    }

    /// Fresh utterances of the same speakers, drawn from an independent seed.
    pub fn heldout(&self, per_speaker: usize, seed: u64) -> Result<Vec<Utterance>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64_6f75_7421);
        self.sample_utterances(per_speaker, &mut rng, "h")
    }

    /// Renders `script` in the voice of `speaker`.
    pub fn render(&self, speaker: usize, script: &Script) -> Result<MelSpectrogram> {
        let sp = self
            .speakers
            .get(speaker)
            .ok_or_else(|| Error::Contract(format!("no speaker {speaker}")))?;
        let frames = script.frames();
        let mut rng = ChaCha8Rng::seed_from_u64(script.noise_seed);
        let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
        let mut content = Vec::with_capacity(frames);
        for seg in &script.segments {
            let phone = self
                .phones
                .get(seg.phone)
                .ok_or_else(|| Error::Contract(format!("no phone {}", seg.phone)))?;
            let harm = phone.voiced.then(|| harmonics(sp.f0_hz * seg.f0_ratio));
            for _ in 0..seg.frames {
                content.push((&phone.shape, harm.clone()));
            }
        }
        let mut data = Vec::with_capacity(frames * BANDS);
        for t in 0..frames {
            // three-tap smoothing of the phone layer across segment boundaries
            let prev = &content[t.saturating_sub(1)].0;
            let next = &content[(t + 1).min(frames - 1)].0;
            let (cur, harm) = &content[t];
            for b in 0..BANDS {
                let phone = 0.25 * prev[b] + 0.5 * cur[b] + 0.25 * next[b];
                let h = harm.as_ref().map_or(0.0, |h| h[b]);
                data.push(BASE_LEVEL + sp.envelope[b] + phone + h + noise.sample(&mut rng));
            }
        }
        MelSpectrogram::new(frames, BANDS, data)
    }

    /// Mean distance between per-utterance average spectra of different
    /// speakers, and of the same speaker: `(inter, intra)`.
    pub fn separation(&self) -> (f64, f64) {
        let means: Vec<(usize, Vec<f64>)> = self
            .utterances
            .iter()
            .map(|u| {
                let mut m = vec![0.0; BANDS];
                for t in 0..u.mel.frames() {
                    m.iter_mut().zip(u.mel.frame(t)).for_each(|(a, &v)| *a += v);
                }
                m.iter_mut().for_each(|a| *a /= u.mel.frames() as f64);
                (u.speaker, m)
            })
            .collect();
        let (mut inter, mut intra) = ((0.0, 0usize), (0.0, 0usize));
        for (i, (si, mi)) in means.iter().enumerate() {
            for (sj, mj) in &means[i + 1..] {
                let d = rms_distance(mi, mj);
                let acc = if si == sj { &mut intra } else { &mut inter };
                acc.0 += d;
                acc.1 += 1;
            }
        }
        (inter.0 / inter.1.max(1) as f64, intra.0 / intra.1.max(1) as f64)
    }

    /// Writes one cache file per utterance plus `manifest.txt`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        write_utterances(dir, &self.utterances)
    }
}

/// One manifest line: `speaker_id utterance_id n_frames path`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub speaker: String,
    pub utterance: String,
    pub frames: usize,
    pub path: PathBuf,
}

pub fn write_utterances(dir: &Path, utterances: &[Utterance]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for u in utterances {
        let name = format!("{}.melf", u.id);
        u.mel.write_melf(&dir.join(&name))?;
        manifest.push_str(&format!("s{:02} {} {} {name}\n", u.speaker, u.id, u.mel.frames()));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |detail: String| Error::Parse {
                file: path.display().to_string(),
                detail: format!("line {}: {detail}", i + 1),
            };
            let [speaker, utterance, frames, p] = f[..] else {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            };
            let frames = frames.parse().map_err(|e| bad(format!("n_frames {frames:?}: {e}")))?;
            Ok(ManifestEntry {
                speaker: speaker.to_string(),
                utterance: utterance.to_string(),
                frames,
                path: base.join(p),
            })
        })
        .collect()
}
