use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use vidseg::checkpoint::Checkpoint;
use vidseg::clipio::{load_dataset, load_mask, save_mask, ClassVocabulary};
use vidseg::config::Config;
use vidseg::protocol::{cross_dataset_eval, evaluate, ClassFilter, Predictor};
use vidseg::synthdata::{generate, make_default_benchmark, GeneratorSpec};
use vidseg::train::train_loop;
use vidseg::visualize::save_overlay;

#[derive(Parser)]
#[command(name = "vidseg", version, about = "Open-vocabulary video semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (the default benchmark without --spec).
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; trailing `key=value` pairs override the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint over every annotated frame.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        filter: String,
        /// Directory for the JSON report (named after the config fingerprint).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Embed the dataset's own class names instead of requiring the training vocabulary.
        #[arg(long)]
        cross: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write predicted label maps for every frame of one video.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a label map as a color-coded RGBA overlay.
    Visualize {
        #[arg(long)]
        mask: PathBuf,
        /// `vocab.txt` of the dataset, or a dataset root containing it.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_vocab_size(path: &Path) -> Result<usize> {
    let file = if path.is_dir() { path.join("vocab.txt") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out, seed } => match spec {
            Some(p) => {
                let mut spec = GeneratorSpec::from_file(&p)?;
                if let Some(s) = seed {
                    spec.seed = s;
                }
                let vocab = generate(&spec, &out)?;
                println!("wrote {} videos, {} classes to {}", spec.videos, vocab.len(), out.display());
            }
            None => {
                make_default_benchmark(&out, seed.unwrap_or(0))?;
                println!("wrote default benchmark to {}", out.display());
            }
        },
        Cmd::Train { config, data, out, seed, overrides } => {
            let mut cfg = match config {
                Some(p) => Config::from_file(&p)?,
                None => Config::default(),
            };
            cfg.apply_overrides(&overrides)?;
            if let Some(s) = seed {
                cfg.apply_overrides(&[format!("train.seed={s}")])?;
            }
            let ds = load_dataset(&data)?;
            let outcome = train_loop(&cfg, &ds, Some(&out))?;
            fs::write(out.join("config.txt"), cfg.to_document()).context("writing config.txt")?;
            if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
                println!("loss {:.4} -> {:.4} over {} iterations", first.loss, last.loss, outcome.history.len());
            }
            println!("leakage audit: {} unseen pixels supervised", outcome.leaked_pixels);
            println!("checkpoint {}", out.join("checkpoint.bin").display());
        }
        Cmd::Eval { checkpoint, data, filter, report, cross, seed: _ } => {
            let filter: ClassFilter = filter.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let rep = if cross { cross_dataset_eval(&ck, &ds, filter)? } else { evaluate(&ck, &ds, filter)? };
            println!("{}", rep.to_json());
            if let Some(dir) = report {
                let path = rep.write(&dir, &format!("eval_{filter}"))?;
                eprintln!("report {}", path.display());
            }
        }
        Cmd::Predict { checkpoint, data, video, out, seed: _ } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let Some(v) = ds.videos.iter().find(|v| v.id == video) else {
                bail!("no video {video:?} in {}", data.display());
            };
            let p = Predictor::from_checkpoint(&ck)?;
            let names = ds.vocab.names().to_vec();
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for t in 0..v.len() {
                let labels = p.predict(&ds, v, t, &names)?;
                let f = &v.frames[t];
                save_mask(&out.join(format!("{t:06}.png")), f.h, f.w, &labels)?;
            }
            println!("wrote {} masks to {}", v.len(), out.display());
        }
        Cmd::Visualize { mask, vocab, out, seed: _ } => {
            let n = if vocab.is_dir() {
                ClassVocabulary::read(&vocab).map(|v| v.len()).or_else(|_| read_vocab_size(&vocab))?
            } else {
                read_vocab_size(&vocab)?
            };
            let (h, w, labels) = load_mask(&mask)?;
            save_overlay(&out, h, w, &labels, n)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
