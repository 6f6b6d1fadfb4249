use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spkenc_core::checkpoint;
use spkenc_core::config::RunConfig;
use spkenc_core::dataset::{write_utterances, ToySpeakerDataset};
use spkenc_core::eval::{mcd, McdTable, PairGroup};
use spkenc_core::frontend::{load_wav, MelFrontend, MelSpectrogram};
use spkenc_core::gradcheck::{self, GradcheckOptions};
use spkenc_core::pooling::EmbeddingRecord;
use spkenc_core::vc::{train_joint, VcModel};

#[derive(Parser)]
#[command(name = "spkenc", version, about = "Speaker encoder and toy voice conversion toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Scale the analytic gradients of one component, as `NAME` or `NAME:SCALE`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Jointly train the toy conversion model; writes a checkpoint directory with `loss.csv`.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print one embedding record per input (WAV or mel cache).
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write the records here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity between the embeddings of two inputs.
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        a: PathBuf,
        b: PathBuf,
    },
    /// Convert SRC towards the speaker of TGT and write a mel cache file.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        src: PathBuf,
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mel distortion between two inputs, or a table over a pair list.
    Mcd {
        /// Converted and reference inputs.
        #[arg(num_args = 2, required_unless_present = "pairs")]
        files: Vec<PathBuf>,
        /// Lines of `system group converted reference`, group being inter or intra.
        #[arg(long, conflicts_with = "files")]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Log-mel features of WAV files as mel cache files.
    Features {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output file for a single input, otherwise a directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the seeded toy dataset (training and held-out utterances).
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn read_input(path: &Path, cfg: &RunConfig) -> Result<MelSpectrogram> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let wave = load_wav(path)?;
        Ok(MelFrontend::new(&cfg.frontend)
            .process(&wave)
            .with_context(|| format!("extracting features from {}", path.display()))?)
    } else {
        Ok(MelSpectrogram::read_melf(path)?)
    }
}

fn load_model(dir: &Path, common: &Common) -> Result<(VcModel<f64>, RunConfig)> {
    let expected = match &common.config {
        Some(_) => Some(load_config(common)?),
        None => None,
    };
    let (model, cfg) = checkpoint::load::<f64>(dir, expected.as_ref())
        .with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok((model, cfg))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gradcheck_cmd(inject_fault: Option<String>) -> Result<bool> {
    let mut opts = GradcheckOptions::default();
    if let Some(spec) = inject_fault {
        let (name, scale) = match spec.split_once(':') {
            Some((n, s)) => (n.to_string(), s.parse().context("fault scale")?),
            None => (spec, 1.5),
        };
        if !gradcheck::COMPONENTS.contains(&name.as_str()) {
            bail!("unknown component `{name}`");
        }
        opts.fault = Some((name, scale));
    }
    let mut ok = true;
    for name in gradcheck::COMPONENTS {
        let r = gradcheck::check_component(name, &opts)?;
        println!("{}", r.line());
        if !r.passed {
            eprintln!("gradient check failed: {}", r.name);
            ok = false;
        }
    }
    Ok(ok)
}

fn train_cmd(common: &Common, out: &Path, steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let tc = &cfg.train;
    let data = ToySpeakerDataset::generate(tc.speakers, tc.utterances_per_speaker, tc.seed)?;
    let trained = train_joint::<f64>(&data, &cfg, |step, loss| {
        if step % 100 == 0 {
            eprintln!("step {step} loss {loss:.5}");
        }
    })?;
    let mut model = trained.model;
    checkpoint::save(out, &mut model, &cfg)?;
    let mut log = String::from("step,loss\n");
    for (step, loss) in &trained.losses {
        writeln!(log, "{step},{loss}")?;
    }
    let log_path = out.join("loss.csv");
    std::fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    println!("steps: {}", trained.losses.len());
    if let (Some(first), Some(last)) = (trained.losses.first(), trained.losses.last()) {
        println!("initial_loss: {:.6}", first.1);
        println!("final_loss: {:.6}", last.1);
    }
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn mcd_cmd(files: &[PathBuf], pairs: Option<&Path>, out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    if let Some(list) = pairs {
        let text = std::fs::read_to_string(list).with_context(|| format!("reading {}", list.display()))?;
        let base = list.parent().unwrap_or(Path::new("."));
        let mut table = McdTable::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [system, group, conv, reference] = f[..] else {
                bail!("{}: line {}: expected `system group converted reference`", list.display(), i + 1);
            };
            let group: PairGroup = group.parse()?;
            let r = mcd(&read_input(&base.join(conv), cfg)?, &read_input(&base.join(reference), cfg)?)?;
            if r.truncated {
                eprintln!("warning: line {}: lengths differ, truncated to {} frames", i + 1, r.frames);
            }
            table.add(system, group, r.mean_db);
        }
        return write_or_print(out, &table.to_csv());
    }
    let r = mcd(&read_input(&files[0], cfg)?, &read_input(&files[1], cfg)?)?;
    if r.truncated {
        eprintln!("warning: lengths differ, truncated to {} frames", r.frames);
    }
    write_or_print(out, &format!("mcd_db: {:.6}\nframes: {}\n", r.mean_db, r.frames))
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    match cli.command {
        Command::Gradcheck { inject_fault } => return gradcheck_cmd(inject_fault),
        Command::Train { out, steps } => train_cmd(common, &out, steps)?,
        Command::Embed {
            checkpoint,
            inputs,
            out,
        } => {
            let (model, cfg) = load_model(&checkpoint, common)?;
            let mut text = String::new();
            for p in &inputs {
                let record = EmbeddingRecord {
                    id: stem(p),
                    embedding: model.speaker.embed(&read_input(p, &cfg)?)?,
                };
                writeln!(text, "{}", record.to_line())?;
            }
            write_or_print(out.as_deref(), &text)?;
        }
        Command::Compare { checkpoint, a, b } => {
            let (model, cfg) = load_model(&checkpoint, common)?;
            let ea = model.speaker.embed(&read_input(&a, &cfg)?)?;
            let eb = model.speaker.embed(&read_input(&b, &cfg)?)?;
            println!("{:.9}", ea.cosine(&eb)?);
        }
        Command::Convert {
            checkpoint,
            src,
            tgt,
            out,
        } => {
            let (model, cfg) = load_model(&checkpoint, common)?;
            let converted = model.convert(&read_input(&src, &cfg)?, &read_input(&tgt, &cfg)?)?;
            converted.write_melf(&out)?;
            println!("frames: {}", converted.frames());
        }
        Command::Mcd { files, pairs, out } => {
            mcd_cmd(&files, pairs.as_deref(), out.as_deref(), &load_config(common)?)?;
        }
        Command::Features { inputs, out } => {
            let cfg = load_config(common)?;
            let single = inputs.len() == 1 && !out.is_dir();
            if !single {
                std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            }
            for p in &inputs {
                let mel = read_input(p, &cfg)?;
                let dst = if single { out.clone() } else { out.join(format!("{}.melf", stem(p))) };
                mel.write_melf(&dst)?;
                println!("{} {} {}", p.display(), mel.frames(), dst.display());
            }
        }
        Command::GenData { out } => {
            let cfg = load_config(common)?;
            let tc = &cfg.train;
            let data = ToySpeakerDataset::generate(tc.speakers, tc.utterances_per_speaker, tc.seed)?;
            let train = data.write(&out.join("train"))?;
            let held = data.heldout(cfg.eval.heldout_utterances, cfg.eval.heldout_seed)?;
            let heldout = write_utterances(&out.join("heldout"), &held)?;
            let (inter, intra) = data.separation();
            println!("train: {}", train.display());
            println!("heldout: {}", heldout.display());
            println!("inter_distance: {inter:.6}");
            println!("intra_distance: {intra:.6}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
