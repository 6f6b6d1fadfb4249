//! Objective metrics: mel distortion, cosine similarity and a speaker
//! discriminability report.

use std::f64::consts::LN_10;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::pooling::SpeakerEmbedding;

/// `(10 / ln 10) · sqrt(2 · Σ_n (a_n − b_n)²)` in dB.
pub fn mcd_frame(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    10.0 / LN_10 * (2.0 * sq).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct McdResult {
    pub per_frame: Vec<f64>,
    pub mean_db: f64,
    pub frames: usize,
    /// The inputs had different lengths and the longer one was truncated.
    pub truncated: bool,
}

/// Mean per-frame distortion over the first `min(len)` frames of both inputs.
pub fn mcd(conv: &MelSpectrogram, reference: &MelSpectrogram) -> Result<McdResult> {
    if conv.bands() != reference.bands() {
        return Err(Error::dim(
            "mcd",
            &[conv.frames(), conv.bands()],
            &[reference.frames(), reference.bands()],
        ));
    }
    let frames = conv.frames().min(reference.frames());
    if frames == 0 {
        return Err(Error::InputLength {
            needed: 1,
            got: 0,
            unit: "frames",
        });
    }
    let per_frame: Vec<f64> = (0..frames)
        .map(|t| mcd_frame(conv.frame(t), reference.frame(t)))
        .collect();
    let mean_db = per_frame.iter().sum::<f64>() / frames as f64;
    Ok(McdResult {
        per_frame,
        mean_db,
        frames,
        truncated: conv.frames() != reference.frames(),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminabilityReport {
    pub intra: f64,
    pub inter: f64,
    pub margin: f64,
    pub eer: f64,
    pub intra_trials: usize,
    pub inter_trials: usize,
}

impl DiscriminabilityReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("intra_cosine", self.intra),
            ("inter_cosine", self.inter),
            ("margin", self.margin),
            ("eer", self.eer),
        ] {
            writeln!(s, "{k}: {v:.6}").expect("write to string");
        }
        writeln!(s, "intra_trials: {}", self.intra_trials).expect("write to string");
        writeln!(s, "inter_trials: {}", self.inter_trials).expect("write to string");
        s
    }
}

/// Equal error rate of `targets` (same speaker) against `nontargets` scores.
///
/// Sweeps every observed score as an acceptance threshold (accept `s >= θ`),
/// plus one above the maximum, and returns `(FAR + FRR) / 2` at the threshold
/// minimizing `|FAR − FRR|`, clamped to `[0, 0.5]`.
pub fn equal_error_rate(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Contract("EER needs target and non-target scores".into()));
    }
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    let mut best = (f64::INFINITY, 0.5);
    for &th in &thresholds {
        let far = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nn;
        let frr = targets.iter().filter(|&&s| s < th).count() as f64 / nt;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, (far + frr) / 2.0);
        }
    }
    Ok(best.1.clamp(0.0, 0.5))
}

/// All same-speaker pairs against all cross-speaker pairs.
///
/// `groups[i]` holds the embeddings of speaker `i`.
pub fn discriminability(groups: &[Vec<SpeakerEmbedding>]) -> Result<DiscriminabilityReport> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Contract(
            "discriminability needs at least 2 speakers with at least 2 utterances each".into(),
        ));
    }
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    let flat: Vec<(usize, &SpeakerEmbedding)> = groups
        .iter()
        .enumerate()
        .flat_map(|(s, g)| g.iter().map(move |e| (s, e)))
        .collect();
    for (i, (si, ei)) in flat.iter().enumerate() {
        for (sj, ej) in &flat[i + 1..] {
            let c = ei.cosine(ej)?;
            if si == sj {
                intra.push(c);
            } else {
                inter.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mi, mx) = (mean(&intra), mean(&inter));
    Ok(DiscriminabilityReport {
        intra: mi,
        inter: mx,
        margin: mi - mx,
        eer: equal_error_rate(&intra, &inter)?,
        intra_trials: intra.len(),
        inter_trials: inter.len(),
    })
}

/// Whether a conversion pair crosses speaker groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairGroup {
    Inter,
    Intra,
}

impl std::str::FromStr for PairGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter" => Ok(Self::Inter),
            "intra" => Ok(Self::Intra),
            other => Err(Error::Config(format!("unknown pair group `{other}`, expected inter or intra"))),
        }
    }
}

/// Average-MCD table with columns `system, inter, intra, average`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct McdTable {
    rows: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl McdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, system: &str, group: PairGroup, mcd_db: f64) {
        let idx = match self.rows.iter().position(|r| r.0 == system) {
            Some(i) => i,
            None => {
                self.rows.push((system.to_string(), Vec::new(), Vec::new()));
                self.rows.len() - 1
            }
        };
        let row = &mut self.rows[idx];
        match group {
            PairGroup::Inter => row.1.push(mcd_db),
            PairGroup::Intra => row.2.push(mcd_db),
        }
    }

    /// `(system, inter, intra, average)`; a column with no pairs is NaN.
    pub fn rows(&self) -> Vec<(String, f64, f64, f64)> {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        self.rows
            .iter()
            .map(|(s, inter, intra)| {
                let all: Vec<f64> = inter.iter().chain(intra).copied().collect();
                (s.clone(), mean(inter), mean(intra), mean(&all))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("system,inter,intra,average\n");
        let cell = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.4}") };
        for (sys, inter, intra, avg) in self.rows() {
            writeln!(s, "{sys},{},{},{}", cell(inter), cell(intra), cell(avg)).expect("write to string");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(frames: usize, data: Vec<f64>) -> MelSpectrogram {
        let bands = data.len() / frames;
        MelSpectrogram::new(frames, bands, data).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let a = mel(2, (0..512).map(|i| i as f64 * 0.01).collect());
        let r = mcd(&a, &a).unwrap();
        assert_eq!(r.mean_db, 0.0);
        assert!(!r.truncated);
    }

    #[test]
    fn single_unit_difference() {
        let a = mel(1, vec![0.0; 256]);
        let mut d = vec![0.0; 256];
        d[17] = 1.0;
        let r = mcd(&a, &mel(1, d)).unwrap();
        assert!((r.mean_db - 6.1421).abs() < 1e-3);
    }

    #[test]
    fn truncates_and_flags_length_mismatch() {
        let a = mel(3, vec![0.0; 3 * 4]);
        let b = mel(2, vec![1.0; 2 * 4]);
        let r = mcd(&a, &b).unwrap();
        assert_eq!(r.frames, 2);
        assert!(r.truncated);
        assert!(mcd(&a, &mel(1, vec![0.0; 5])).is_err());
    }

    #[test]
    fn cosine_cases() {
        let e = [1.0, -2.0, 0.5];
        assert!((cosine(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        assert!((cosine(&e, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Contract(_))));
    }

    fn basis(i: usize) -> SpeakerEmbedding {
        let mut v = vec![0.0; 128];
        v[i] = 1.0;
        SpeakerEmbedding::new(v).unwrap()
    }

    #[test]
    fn separable_and_degenerate_reports() {
        let groups: Vec<Vec<_>> = (0..3).map(|s| vec![basis(s); 3]).collect();
        let r = discriminability(&groups).unwrap();
        assert_eq!((r.intra, r.inter, r.eer), (1.0, 0.0, 0.0));
        let same: Vec<Vec<_>> = (0..3).map(|_| vec![basis(0); 2]).collect();
        let r = discriminability(&same).unwrap();
        assert_eq!((r.margin, r.eer), (0.0, 0.5));
        assert!(discriminability(&[vec![basis(0); 2]]).is_err());
    }

    #[test]
    fn table_layout() {
        let mut t = McdTable::new();
        t.add("ddse", PairGroup::Inter, 10.0);
        t.add("ddse", PairGroup::Intra, 8.0);
        t.add("ddse", PairGroup::Intra, 6.0);
        assert_eq!(t.to_csv(), "system,inter,intra,average\nddse,10.0000,7.0000,8.0000\n");
    }
}
