use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use netwarp::bench::{self, BenchConfig, GPU_REFERENCE_MS};
use netwarp::experiment::{self, ExperimentConfig, Mode};
use netwarp::gradcheck::{self, GradcheckConfig};
use netwarp::tape::OpKind;
use netwarp::{Error, Shape};

#[derive(Parser, Debug)]
#[command(name = "netwarp", version, about = "Flow-guided warping of CNN representations for video segmentation")]
struct Cli {
    /// Worker threads for parallel ops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic video dataset.
    Gen {
        /// Dataset spec (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write `checkpoint.nwa` and `loss.csv`.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "netwarp")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate checkpoints on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// May be given several times; rows appear in the given order.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Metrics CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        band_px: Option<usize>,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        /// Master seed of the sweep.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Corrupts one backward rule; the run must then fail.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Time the warp on one feature shape.
    Bench {
        /// N,C,H,W
        #[arg(long, default_value = "1,1024,128,128", value_parser = parse_shape)]
        shape: Shape,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bench CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Baseline,
    Netwarp,
    NetwarpNoflowcnn,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Netwarp => Mode::Netwarp,
            ModeArg::NetwarpNoflowcnn => Mode::NetwarpNoflowcnn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    Conv2d,
    Relu,
    Concat,
    ScaleChannels,
    Add,
    Sub,
    Warp,
    SubsampleFlow,
    MaxPool2,
    Upsample,
    SoftmaxXent,
}

impl From<FaultArg> for OpKind {
    fn from(f: FaultArg) -> OpKind {
        match f {
            FaultArg::Conv2d => OpKind::Conv2d,
            FaultArg::Relu => OpKind::Relu,
            FaultArg::Concat => OpKind::Concat,
            FaultArg::ScaleChannels => OpKind::ScaleChannels,
            FaultArg::Add => OpKind::Add,
            FaultArg::Sub => OpKind::Sub,
            FaultArg::Warp => OpKind::Warp,
            FaultArg::SubsampleFlow => OpKind::SubsampleFlow,
            FaultArg::MaxPool2 => OpKind::MaxPool2,
            FaultArg::Upsample => OpKind::Upsample,
            FaultArg::SoftmaxXent => OpKind::SoftmaxXent,
        }
    }
}

fn parse_shape(s: &str) -> Result<Shape, String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [n, c, h, w] if n * c * h * w > 0 => Ok(Shape::new(n, c, h, w)),
        [_, _, _, _] => Err("every dimension must be positive".into()),
        _ => Err(format!("expected N,C,H,W, got {s:?}")),
    }
}

/// A failed run: exit code 2 for numerical failures, 1 for everything else.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let numerical = err.chain().any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::NonFinite(_))));
        Failure { code: if numerical { 2 } else { 1 }, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn write_out(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    if !path.is_file() {
        bail!("config file {} not found", path.display());
    }
    Ok(ExperimentConfig::load(path)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(anyhow::anyhow!("--threads must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    match cli.cmd {
        Cmd::Gen { config, out, seed } => {
            if !config.is_file() {
                return Err(anyhow::anyhow!("spec file {} not found", config.display()).into());
            }
            let data = experiment::cmd_gen(&config, &out, seed)?;
            println!("wrote {} train and {} test sequences to {}", data.train.len(), data.test.len(), out.display());
        }
        Cmd::Train { config, mode, out, seed, steps } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let mode = Mode::from(mode);
            let every = (cfg.steps / 20).max(1);
            let outcome = experiment::cmd_train(&cfg, mode, &out, |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step:>6}  loss {loss:.5}");
                }
            })?;
            println!(
                "trained {} for {} steps; final loss {}; wrote {}",
                mode.name(),
                outcome.losses.len(),
                outcome.losses.last().map_or("n/a".into(), |l| format!("{l:.5}")),
                out.display()
            );
        }
        Cmd::Eval { config, checkpoint, out, band_px } => {
            let mut cfg = load_config(&config)?;
            if let Some(b) = band_px {
                cfg.band_px = b;
            }
            let report = experiment::cmd_eval(&cfg, &checkpoint)?;
            print!("{}", report.to_text());
            if let Some(path) = out {
                write_out(&path, &report.to_csv())?;
            }
        }
        Cmd::Gradcheck { seed, seeds, inject_fault } => {
            let cfg = GradcheckConfig { seeds, master_seed: seed, fault: inject_fault.map(Into::into), ..Default::default() };
            let reports = gradcheck::run(&cfg)?;
            print!("{}", gradcheck::format_reports(&reports));
            if let Some(bad) = reports.iter().find(|r| !r.passed()) {
                return Err(Failure { code: 2, err: anyhow::anyhow!("gradient check {} failed", bad.name) });
            }
        }
        Cmd::Bench { shape, iters, warmup, seed, out } => {
            let rows = bench::run(&BenchConfig { shape, iters, warmup, seed })?;
            let csv = bench::to_csv(&rows);
            print!("{csv}");
            println!("reference: {GPU_REFERENCE_MS} ms reported on a GPU for 1x1024x128x128 (not comparable)");
            if let Some(path) = out {
                write_out(&path, &csv)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
