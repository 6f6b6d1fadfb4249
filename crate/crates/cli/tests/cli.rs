use std::path::Path;
use std::process::{Command, Output};

fn spkenc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkenc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, "[train]\nspeakers = 3\nutterances_per_speaker = 2\n\n[eval]\nheldout_utterances = 2\n").unwrap();
    path.display().to_string()
}

#[test]
fn gradcheck_reports_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let o = spkenc(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), spkenc_components());
    assert!(lines.iter().all(|l| l.ends_with("PASS") && l.contains("worst_rel=")));
}

fn spkenc_components() -> usize {
    spkenc_core::gradcheck::COMPONENTS.len()
}

#[test]
fn injected_fault_fails_and_names_the_component() {
    let dir = tempfile::tempdir().unwrap();
    let o = spkenc(&["gradcheck", "--inject-fault", "resnet_se_block"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("resnet_se_block"));
    let failing: Vec<String> = stdout(&o).lines().filter(|l| l.ends_with("FAIL")).map(str::to_string).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("resnet_se_block"));
}

#[test]
fn training_is_reproducible_and_tools_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    for out in ["a", "b"] {
        let o = spkenc(&["train", "--config", &cfg, "--steps", "3", "--out", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.txt", "params.bin", "config.toml", "loss.csv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(d.join("a/loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss"));
    assert_eq!(log.lines().count(), 4);

    let o = spkenc(&["train", "--config", &cfg, "--steps", "3", "--seed", "77", "--out", "c"], d);
    assert!(o.status.success());
    assert_ne!(std::fs::read(d.join("a/params.bin")).unwrap(), std::fs::read(d.join("c/params.bin")).unwrap());

    let o = spkenc(&["gen-data", "--config", &cfg, "--out", "data"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let x = "data/heldout/s00_h000.melf";
    let y = "data/heldout/s01_h000.melf";

    let o = spkenc(&["compare", "--checkpoint", "a", x, x], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 1.0);

    let o = spkenc(&["embed", "--checkpoint", "a", x, y], d);
    let lines: Vec<&str> = std::str::from_utf8(&o.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("s00_h000 "));
    assert_eq!(lines[0].split_whitespace().count(), 129);

    let o = spkenc(&["convert", "--checkpoint", "a", x, y, "--out", "conv.melf"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = spkenc(&["mcd", "conv.melf", "conv.melf"], d);
    assert!(stdout(&o).contains("mcd_db: 0.000000"));
    let o = spkenc(&["mcd", x, "conv.melf"], d);
    assert!(o.status.success());

    std::fs::write(d.join("pairs.txt"), format!("vc inter conv.melf {y}\nvc intra conv.melf {x}\n")).unwrap();
    let o = spkenc(&["mcd", "--pairs", "pairs.txt"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "system,inter,intra,average");
    assert!(rows[1].starts_with("vc,"));
}

#[test]
fn zero_steps_checkpoint_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = spkenc(&["train", "--steps", "0", "--out", "init"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = spkenc_core::config::RunConfig::default();
    let mut model = spkenc_core::VcModel64::initialize(&cfg).unwrap();
    spkenc_core::checkpoint::save(&d.join("direct"), &mut model, &cfg).unwrap();
    assert_eq!(std::fs::read(d.join("init/params.bin")).unwrap(), std::fs::read(d.join("direct/params.bin")).unwrap());
}

#[test]
fn features_from_wav() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let samples: Vec<f64> = (0..16_000).map(|i| 0.3 * (i as f64 * 0.2).sin()).collect();
    let wave = spkenc_core::frontend::Waveform::new(samples, 16_000).unwrap();
    spkenc_core::frontend::write_wav(&d.join("tone.wav"), &wave).unwrap();
    let o = spkenc(&["features", "tone.wav", "--out", "tone.melf"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let mel = spkenc_core::frontend::MelSpectrogram::read_melf(&d.join("tone.melf")).unwrap();
    assert_eq!((mel.frames(), mel.bands()), (77, 256));
    let o = spkenc(&["features", "tone.wav", "tone.wav", "--out", "feats"], d);
    assert!(o.status.success());
    assert!(d.join("feats/tone.melf").exists());
}

#[test]
fn errors_exit_nonzero_with_diagnostics_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = spkenc(&["compare", "--checkpoint", "missing", "a.melf", "b.melf"], d);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(stderr(&o).contains("missing"));

    std::fs::write(d.join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let o = spkenc(&["gen-data", "--config", "bad.toml", "--out", "x"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stepz"));

    std::fs::write(d.join("junk.melf"), b"not a mel file").unwrap();
    let o = spkenc(&["mcd", "junk.melf", "junk.melf"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("junk.melf"));

    let o = spkenc(&["train", "--steps", "0", "--out", "ck"], d);
    assert!(o.status.success());
    std::fs::write(d.join("resnet.toml"), "[encoder]\nvariant = \"resnet\"\n").unwrap();
    let o = spkenc(&["embed", "--config", "resnet.toml", "--checkpoint", "ck", "junk.melf"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hash"));
}
