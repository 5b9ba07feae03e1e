use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dclstm::data::{read_corpus, synth_dataset, write_corpus};
use dclstm::gradcheck::{check_kernel, GradKernel};
use dclstm::model::{build, param_count};
use dclstm::train::{evaluate, load_checkpoint, prepare_corpus, run_ablation, save_checkpoint, train, RunConfig};

/// Deformable ConvLSTM video classification.
///
/// Verbosity is read from DCLSTM_LOG (quiet, info or debug; default info).
#[derive(Parser)]
#[command(name = "dclstm", version)]
struct Cli {
    /// Worker threads; 1 gives fully reproducible scheduling.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motion corpus (clip files and a manifest).
    Synth {
        /// Output directory for the clip files and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of clips; labels are assigned round-robin.
        #[arg(long, default_value_t = 200)]
        clips: usize,
        /// Number of motion classes (at least 2).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Frames per clip.
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Frame size as HxW.
        #[arg(long, default_value = "32x32", value_parser = parse_size)]
        size: (usize, usize),
        /// Generator seed; equal seeds give identical corpora.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a corpus and write a checkpoint.
    Train {
        /// Corpus directory (clip files plus manifest).
        #[arg(long)]
        data: PathBuf,
        /// key=value file with model and training settings.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write; rewritten after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// Train the plain ConvLSTM (empty deformable schedule).
        #[arg(long)]
        baseline: bool,
        /// Epoch log; overrides log_path from the config.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        /// Corpus directory (clip files plus manifest).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Which clips to score; `val` re-creates the training split.
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Training config whose split settings `--split val` reuses.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Kernel name, or `all`.
        #[arg(long, default_value = "all")]
        kernel: String,
        /// Random instances per kernel.
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Seed for the random instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train baseline and deformable variants per seed and compare.
    Ablate {
        /// Corpus directory (clip files plus manifest).
        #[arg(long)]
        data: PathBuf,
        /// key=value file; the model must have a deformable schedule.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Print a checkpoint's config, parameters and size.
    Inspect {
        /// Checkpoint to describe.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Val,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad extent {v:?} in {s:?}"));
    Ok((parse(h)?, parse(w)?))
}

fn init_logging() {
    let level = match std::env::var("DCLSTM_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Vec<dclstm::data::VideoClip>> {
    let clips = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    if clips.is_empty() {
        bail!("corpus {} is empty", dir.display());
    }
    log::info!("loaded {} clips from {}", clips.len(), dir.display());
    Ok(clips)
}

fn run(cli: Cli, stdout: &mut impl Write) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Synth { out, clips, classes, frames, size: (h, w), seed } => {
            let corpus = synth_dataset(clips, classes, frames, h, w, seed)?;
            write_corpus(&out, &corpus).with_context(|| format!("writing corpus to {}", out.display()))?;
            writeln!(stdout, "out: {}", out.display())?;
            writeln!(stdout, "clips: {clips}")?;
            writeln!(stdout, "classes: {classes}")?;
            writeln!(stdout, "shape: [{frames}, {h}, {w}, 3]")?;
        }
        Command::Train { data, config, out, baseline, log } => {
            let mut cfg = read_config(&config)?;
            if baseline {
                cfg.model = cfg.model.baseline();
            }
            if log.is_some() {
                cfg.train.log_path = log;
            }
            cfg.train.checkpoint_path = Some(out.clone());
            let (train_set, val_set) = prepare_corpus(load_data(&data)?, &cfg.train)?;
            log::info!("training on {} clips, validating on {}", train_set.len(), val_set.len());
            let mut params = build(&cfg.model)?;
            let history = train(&mut params, &train_set, &val_set, &cfg.train)?;
            save_checkpoint(&params, &out).with_context(|| format!("writing {}", out.display()))?;
            writeln!(stdout, "checkpoint: {}", out.display())?;
            writeln!(
                stdout,
                "variant: {}",
                if cfg.model.is_deformable() { "deformable_convlstm" } else { "normal_convlstm" }
            )?;
            writeln!(stdout, "epochs: {}", history.len())?;
            if let Some(last) = history.last() {
                writeln!(stdout, "train_loss: {:.6}", last.train_loss)?;
                writeln!(stdout, "train_accuracy: {:.6}", last.train_accuracy)?;
                if let Some(m) = &last.val {
                    writeln!(stdout, "val_loss: {:.6}", m.mean_loss)?;
                    writeln!(stdout, "val_accuracy: {:.6}", m.accuracy)?;
                }
            }
        }
        Command::Eval { data, ckpt, split, config } => {
            let params = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let clips = load_data(&data)?;
            let clips = match split {
                Split::All => clips,
                Split::Val => {
                    let cfg = match config {
                        Some(path) => read_config(&path)?.train,
                        None => Default::default(),
                    };
                    prepare_corpus(clips, &cfg)?.1
                }
            };
            let metrics = evaluate(&params, &clips)?;
            writeln!(stdout, "checkpoint: {}", ckpt.display())?;
            write!(stdout, "{metrics}")?;
        }
        Command::Gradcheck { kernel, trials, seed } => {
            let kernels = if kernel == "all" { GradKernel::ALL.to_vec() } else { vec![kernel.parse()?] };
            if trials == 0 {
                bail!("--trials must be at least 1");
            }
            let mut all_pass = true;
            for k in kernels {
                let report = check_kernel(k, trials, seed)?;
                all_pass &= report.passed();
                writeln!(stdout, "{report}")?;
            }
            writeln!(stdout, "result: {}", if all_pass { "pass" } else { "fail" })?;
            if !all_pass {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { data, config, seeds } => {
            let cfg = read_config(&config)?;
            let ablation = run_ablation(load_data(&data)?, &cfg, &seeds)?;
            write!(stdout, "{ablation}")?;
        }
        Command::Inspect { ckpt } => {
            let params = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let cfg = params.config();
            writeln!(stdout, "checkpoint: {}", ckpt.display())?;
            writeln!(stdout, "config_hash: {:#018x}", cfg.hash())?;
            for line in cfg.to_text().lines() {
                let (k, v) = line.split_once('=').unwrap_or((line, ""));
                writeln!(stdout, "config.{k}: {v}")?;
            }
            for (name, dims) in &cfg.shape_table()?.0 {
                writeln!(stdout, "shape.{name}: {dims:?}")?;
            }
            for (name, t) in params.tensors() {
                writeln!(stdout, "param.{name}: {:?}", t.dims())?;
            }
            writeln!(stdout, "param_count: {}", param_count(&params))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let mut out = io::stdout().lock();
    match run(cli, &mut out).and_then(|code| Ok(out.flush().map(|_| code)?)) {
        Ok(code) => code,
        // A closed downstream pipe (e.g. `| head`) is not an error.
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
