//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spkenc_core::checkpoint;
use spkenc_core::config::{EncoderConfig, RunConfig, Variant};
use spkenc_core::dataset::{ToySpeakerDataset, Utterance};
use spkenc_core::eval::{discriminability, mcd};
use spkenc_core::frontend::{dft_power, melspec, MelFrontend, MelSpectrogram, Waveform, SAMPLE_RATE};
use spkenc_core::gradcheck::{run_all, GradcheckOptions};
use spkenc_core::pooling::{uniform_weights, weighted_stats, AttentionBlock, SpeakerEncoder, EMBEDDING_DIM};
use spkenc_core::se_resnet::{excitation, se_rescale, squeeze, SeBlock};
use spkenc_core::tensor::{softmax, Tensor};
use spkenc_core::vc::{
    conversion_trials, embeddings_by_speaker, mean_abs_diff, speaker_gradient_mass, success_rate, target_swap_trials,
    CropSampler, VcModel,
};
use spkenc_core::VcModel64;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("[{}] {id:>3} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }

    fn info(&self, text: String) {
        println!("       {text}");
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let reports = run_all(&GradcheckOptions::default()).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    for c in &reports {
        r.info(c.line());
    }
    let worst = reports.iter().map(|c| c.worst_rel).fold(0.0, f64::max);
    let pass = reports.iter().all(|c| c.passed && c.seeds >= 20) && secs < 120.0;
    r.line(
        "1",
        "gradient suite",
        pass,
        format!("{} components, worst relative error {worst:.2e} < 1e-4, {secs:.1} s < 120 s", reports.len()),
    );
}

fn formula_oracles(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (c, red) = (8, 4);
        let mut se = SeBlock::<f64>::new(c, red, &mut rng).unwrap();
        se.fc1.bias.value = random(&[c / red], &mut rng);
        se.fc2.bias.value = random(&[c], &mut rng);
        let h = random(&[2, c, 5, 6], &mut rng);
        let z = squeeze(&h).unwrap();
        let s = excitation(&z, &se).unwrap();
        let out = se_rescale(&h, &s).unwrap();
        let (w1, b1, w2, b2) = (&se.fc1.weight.value, &se.fc1.bias.value, &se.fc2.weight.value, &se.fc2.bias.value);
        for n in 0..2 {
            let zd: Vec<f64> = (0..c)
                .map(|k| (0..5).flat_map(|f| (0..6).map(move |t| (f, t))).map(|(f, t)| h.at(&[n, k, f, t])).sum::<f64>() / 30.0)
                .collect();
            let hidden: Vec<f64> = (0..c / red)
                .map(|j| ((0..c).map(|i| w1.at(&[j, i]) * zd[i]).sum::<f64>() + b1.at(&[j])).max(0.0))
                .collect();
            for k in 0..c {
                let sd = sig((0..c / red).map(|j| w2.at(&[k, j]) * hidden[j]).sum::<f64>() + b2.at(&[k]));
                worst = worst.max((z.at(&[n, k]) - zd[k]).abs()).max((s.at(&[n, k]) - sd).abs());
                for f in 0..5 {
                    for t in 0..6 {
                        worst = worst.max((out.at(&[n, k, f, t]) - sd * h.at(&[n, k, f, t])).abs());
                    }
                }
            }
        }
    }
    let frame: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
    let a = MelSpectrogram::new(1, 256, frame.clone()).unwrap();
    let mut shifted = frame;
    shifted[17] += 1.0;
    let b = MelSpectrogram::new(1, 256, shifted).unwrap();
    let identity = mcd(&a, &a).unwrap().mean_db;
    let unit = mcd(&a, &b).unwrap().mean_db;
    let pass = worst < 1e-12 && identity == 0.0 && (unit - 6.1421).abs() < 1e-3;
    r.line(
        "2",
        "formula oracles",
        pass,
        format!("SE max deviation {worst:.1e} < 1e-12; MCD identity {identity} dB, unit case {unit:.5} dB (6.1421 ± 1e-3)"),
    );
}

fn shape_contract(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pass = true;
    let mut seen = Vec::new();
    for (label, cfg) in [("default", RunConfig::default().encoder), ("wide", EncoderConfig::default())] {
        let enc = SpeakerEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        let c_last = *cfg.channels.last().unwrap();
        for t in [8usize, 50, 100, 257] {
            let x = random(&[1, 1, 256, t], &mut rng);
            let h = enc.extractor.infer(&x, cfg.variant).unwrap();
            let e = enc.infer(&x).unwrap();
            pass &= h.shape() == [1, t.div_ceil(8), c_last * 32] && e.shape() == [1, EMBEDDING_DIM];
            pass &= e.data().iter().all(|v| v.is_finite());
            seen.push(format!("{label} T={t}->{:?}", &h.shape()[1..]));
        }
    }
    r.line("3", "shape contract", pass, seen.join(", "));
}

fn pooling_equivalences(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut stats_dev, mut sum_dev, mut shift_dev): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..200 {
        let (t, d) = (rng.gen_range(1..60), rng.gen_range(1..12));
        let h = random(&[2, t, d], &mut rng).scale(rng.gen_range(0.1..10.0));
        let u = weighted_stats(&h, &uniform_weights(2, t), 1e-12).unwrap();
        for n in 0..2 {
            for k in 0..d {
                let col: Vec<f64> = (0..t).map(|i| h.at(&[n, i, k])).collect();
                let mean = col.iter().sum::<f64>() / t as f64;
                let std = (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t as f64).max(1e-12).sqrt();
                stats_dev = stats_dev.max((u.at(&[n, k]) - mean).abs()).max((u.at(&[n, d + k]) - std).abs());
            }
        }
        let att = AttentionBlock::<f64>::new(d, 4, &mut rng);
        let alpha = att.infer(&h).unwrap();
        for row in alpha.data().chunks(t) {
            sum_dev = sum_dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let scores = random(&[2, t], &mut rng).scale(5.0);
        let shift = rng.gen_range(-100.0..100.0);
        let a = softmax(&scores, 1).unwrap();
        let b = softmax(&scores.map(|v| v + shift), 1).unwrap();
        shift_dev = shift_dev.max(a.max_abs_diff(&b));
    }
    let pass = stats_dev <= 1e-9 && sum_dev <= 1e-9 && shift_dev <= 1e-12;
    r.line(
        "4",
        "pooling equivalences",
        pass,
        format!("uniform vs plain stats {stats_dev:.1e} <= 1e-9, |sum(alpha) - 1| {sum_dev:.1e} <= 1e-9, softmax shift {shift_dev:.1e} <= 1e-12"),
    );
}

fn joint_training_gradient(r: &mut Report) {
    let cfg = RunConfig::default();
    let data = ToySpeakerDataset::generate(cfg.train.speakers, 2, cfg.train.seed).unwrap();
    let mels: Vec<&MelSpectrogram> = data.utterances.iter().map(|u| &u.mel).collect();
    let batch = CropSampler::new(cfg.train.seed, cfg.train.batch_size, cfg.train.crop_frames)
        .next::<f64>(&mels)
        .unwrap();
    let mut model = VcModel64::initialize(&cfg).unwrap();
    let loss = model.accumulate_gradients(&batch, cfg.train.loss, cfg.train.recon_weight).unwrap();
    let mass = speaker_gradient_mass(&mut model);
    r.line(
        "5",
        "joint-training gradient flow",
        mass > 0.0 && mass.is_finite(),
        format!("reconstruction loss {loss:.4}, speaker-encoder |grad| sum {mass:.3e} > 0"),
    );
}

fn run_cli(args: &[&str], cwd: &Path) -> (bool, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_spkenc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    (o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn read_losses(path: &Path) -> Vec<f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn mean_recon(model: &VcModel<f64>, utts: &[Utterance]) -> f64 {
    utts.iter()
        .map(|u| mean_abs_diff(&model.reconstruct(&u.mel).unwrap(), &u.mel).unwrap())
        .sum::<f64>()
        / utts.len() as f64
}

fn train_variant(dir: &Path, variant: Variant) -> (Option<VcModel<f64>>, f64, Vec<f64>) {
    let name = variant.as_str();
    let cfg_path = dir.join(format!("{name}.toml"));
    std::fs::write(&cfg_path, format!("[encoder]\nvariant = \"{name}\"\n")).unwrap();
    let start = Instant::now();
    let (ok, err) = run_cli(&["train", "--config", cfg_path.to_str().unwrap(), "--out", name], dir);
    let secs = start.elapsed().as_secs_f64();
    if !ok {
        println!("       train {name} failed: {err}");
        return (None, secs, Vec::new());
    }
    let losses = read_losses(&dir.join(name).join("loss.csv"));
    let (model, _) = checkpoint::load::<f64>(&dir.join(name), None).unwrap();
    (Some(model), secs, losses)
}

fn trained_criteria(r: &mut Report, dir: &Path) {
    let cfg = RunConfig::default();
    let data = ToySpeakerDataset::generate(cfg.train.speakers, cfg.train.utterances_per_speaker, cfg.train.seed).unwrap();
    let heldout = data.heldout(cfg.eval.heldout_utterances, cfg.eval.heldout_seed).unwrap();
    let (inter, intra) = data.separation();
    r.info(format!(
        "toy data: {} speakers x {} utterances, envelope distance inter {inter:.3} vs intra {intra:.3}; {} held-out utterances",
        cfg.train.speakers,
        cfg.train.utterances_per_speaker,
        heldout.len()
    ));

    let (ddse, secs, losses) = train_variant(dir, Variant::Ddse);
    let Some(ddse) = ddse else {
        for (id, name) in [("6", "toy convergence"), ("7", "one-shot conversion proxy"), ("8", "discriminability")] {
            r.line(id, name, false, "training failed".into());
        }
        return;
    };
    let initial = losses[0];
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let init_model = VcModel64::initialize(&cfg).unwrap();
    let (recon0, recon1) = (mean_recon(&init_model, &heldout), mean_recon(&ddse, &heldout));
    r.line(
        "6",
        "toy convergence",
        losses.len() <= 2000 && final_mean <= 0.5 * initial && secs < 900.0,
        format!(
            "{} steps, L1 {initial:.4} -> {final_mean:.4} (mean of last {} steps, ratio {:.3} <= 0.5), {secs:.0} s < 900 s",
            losses.len(),
            tail.len(),
            final_mean / initial
        ),
    );
    r.info(format!(
        "held-out reconstruction L1: initial model {recon0:.4}, trained {recon1:.4}; last step loss {:.4}",
        losses[losses.len() - 1]
    ));

    let trials = conversion_trials(&ddse, &heldout, cfg.eval.conversion_trials, cfg.eval.heldout_seed).unwrap();
    let rate = success_rate(&trials);
    r.line(
        "7",
        "one-shot conversion proxy",
        trials.len() >= 100 && rate >= 0.8,
        format!("{:.0}% of {} trials closer to the target speaker than to the source (>= 80%)", 100.0 * rate, trials.len()),
    );

    let groups = embeddings_by_speaker(&ddse.speaker, &heldout).unwrap();
    let disc = discriminability(&groups).unwrap();
    r.line(
        "8",
        "discriminability",
        disc.margin >= 0.2 && disc.eer <= 0.10,
        format!(
            "intra {:.3}, inter {:.3}, margin {:.3} >= 0.2, EER {:.1}% <= 10% ({} + {} trials)",
            disc.intra,
            disc.inter,
            disc.margin,
            100.0 * disc.eer,
            disc.intra_trials,
            disc.inter_trials
        ),
    );

    let swaps = target_swap_trials(&ddse, &heldout, 50, cfg.eval.heldout_seed + 1).unwrap();
    let closer = swaps.iter().filter(|(same, diff)| same < diff).count();
    let (ms, md) = (
        swaps.iter().map(|p| p.0).sum::<f64>() / swaps.len() as f64,
        swaps.iter().map(|p| p.1).sum::<f64>() / swaps.len() as f64,
    );
    r.info(format!(
        "target swap: same-speaker change {ms:.4} vs other-speaker change {md:.4} (L1), smaller in {closer}/{} trials",
        swaps.len()
    ));

    let (resnet, rsecs, rlosses) = train_variant(dir, Variant::Resnet);
    match resnet {
        Some(resnet) => {
            let rtrials = conversion_trials(&resnet, &heldout, cfg.eval.conversion_trials, cfg.eval.heldout_seed).unwrap();
            let rdisc = discriminability(&embeddings_by_speaker(&resnet.speaker, &heldout).unwrap()).unwrap();
            let tail = &rlosses[rlosses.len().saturating_sub(100)..];
            r.info(format!(
                "ablation (resnet, reported only): conversion {:.0}% vs ddse {:.0}%; margin {:.3} vs {:.3}; EER {:.1}% vs {:.1}%; final loss {:.4}; {rsecs:.0} s",
                100.0 * success_rate(&rtrials),
                100.0 * rate,
                rdisc.margin,
                disc.margin,
                100.0 * rdisc.eer,
                100.0 * disc.eer,
                tail.iter().sum::<f64>() / tail.len() as f64
            ));
            let probe = &heldout[0].mel;
            let a = ddse.speaker.embed(probe).unwrap();
            let b = resnet.speaker.embed(probe).unwrap();
            r.info(format!("trained variants differ: cosine between their embeddings of one utterance {:.4}", a.cosine(&b).unwrap()));
        }
        None => r.info("ablation (resnet): training failed".into()),
    }
}

fn determinism(r: &mut Report, dir: &Path) {
    let mut same = true;
    for out in ["det_a", "det_b"] {
        let (ok, err) = run_cli(&["train", "--steps", "25", "--out", out], dir);
        if !ok {
            println!("       {err}");
            same = false;
        }
    }
    let files = ["manifest.txt", "params.bin", "config.toml", "loss.csv"];
    for f in files {
        let a = std::fs::read(dir.join("det_a").join(f)).ok();
        let b = std::fs::read(dir.join("det_b").join(f)).ok();
        same &= a.is_some() && a == b;
    }
    r.line(
        "9",
        "determinism",
        same,
        format!("two 25-step runs with the same seed: {} byte-identical", files.join(", ")),
    );
}

fn frontend_checks(r: &mut Report) {
    let cfg = RunConfig::default().frontend;
    let floor = cfg.log_floor.ln();
    let silence = melspec(&Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap()).unwrap();
    let silent = silence.data().iter().all(|&v| v == floor);

    let mel_of = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz_of = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel_of(cfg.f_min), mel_of(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let expected = (0..cfg.n_mels)
        .min_by(|&a, &b| {
            let da = (hz_of(lo + (a + 1) as f64 * step) - 1000.0).abs();
            let db = (hz_of(lo + (b + 1) as f64 * step) - 1000.0).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    let tone: Vec<f64> = (0..16_000).map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 16_000.0).sin()).collect();
    let mel = MelFrontend::new(&cfg).process(&Waveform::new(tone, SAMPLE_RATE).unwrap()).unwrap();
    let peaks_ok = (0..mel.frames()).all(|t| {
        let f = mel.frame(t);
        (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])) == Some(expected)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut parseval: f64 = 0.0;
    for _ in 0..50 {
        let x: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = dft_power(&x).unwrap();
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq = (p[0] + 2.0 * p[1..512].iter().sum::<f64>() + p[512]) / 1024.0;
        parseval = parseval.max((time - freq).abs() / time);
    }
    let frames = mel.frames();
    let pass = silent && peaks_ok && parseval <= 1e-9 && frames == 77;
    r.line(
        "10",
        "frontend checks",
        pass,
        format!(
            "silence all-floor {silent}; 1 kHz argmax band {expected} in every frame {peaks_ok}; Parseval rel {parseval:.1e} <= 1e-9; 16000 samples -> {frames} frames"
        ),
    );
}

fn main() {
    let mut report = Report { failures: 0 };
    let dir = tempfile::tempdir().expect("temporary directory");
    gradient_suite(&mut report);
    formula_oracles(&mut report);
    shape_contract(&mut report);
    pooling_equivalences(&mut report);
    joint_training_gradient(&mut report);
    trained_criteria(&mut report, dir.path());
    determinism(&mut report, dir.path());
    frontend_checks(&mut report);
    if report.failures > 0 {
        println!("{} acceptance criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
