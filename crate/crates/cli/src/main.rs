//! `ca`: every stage of the confidence amendment pipeline, plus the
//! end-to-end runner, the ablations, the bound calculator and the plots.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when the work itself fails.

mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ca_core::config::ExperimentConfig;
use ca_core::par::Execution;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "ca",
    version,
    about = "Confidence amendment OOD detection pipeline"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Config file (`section.key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(
        long = "override",
        short = 'o',
        value_name = "KEY=VALUE",
        global = true
    )]
    overrides: Vec<String>,
    /// Seed for single-seed stages; replaces `run.seeds` for run and ablations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working or output directory.
    #[arg(long, global = true, default_value = "ca-out")]
    out: PathBuf,
    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Disable the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the benchmark splits into <out>/data.
    GenData,
    /// Train the standard network on <out>/data/id_train.csv.
    Train,
    /// Run the sampling chains from <out>/standard.ckpt.
    Synthesize,
    /// Attach amended targets to <out>/trajectory.txt.
    Amend {
        /// Weight exponent; defaults to `amend.a`.
        #[arg(long)]
        a: Option<f64>,
    },
    /// Distill the amended trajectory into <out>/auxiliary.ckpt.
    Distill,
    /// Score the near and far mixtures into <out>/scores.
    Score {
        /// Comma-separated detectors; defaults to `detect.detectors`.
        #[arg(long, value_delimiter = ',')]
        detectors: Vec<String>,
    },
    /// AUROC and detection error for every score file in <out>/scores.
    Eval,
    /// Whole pipeline for every seed.
    Run,
    /// CA AUROC across weight exponents, one trajectory per seed.
    AblateA {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,1,10,100")]
        grid: Vec<f64>,
    },
    /// CA AUROC across chain horizons.
    AblateT {
        #[arg(long, value_delimiter = ',', default_value = "100,500,1000")]
        grid: Vec<usize>,
    },
    /// Evaluate the generalization bound.
    Bound {
        #[arg(long)]
        a: f64,
        /// Number of chains.
        #[arg(long = "N")]
        n: usize,
        /// Chain horizon.
        #[arg(long = "T")]
        t: usize,
        /// Hypothesis radius.
        #[arg(long = "R", default_value_t = 1.0)]
        r: f64,
        /// Number of classes.
        #[arg(long = "K")]
        k: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Render SVG plots from the CSVs in <out>.
    Curves,
}

/// Failure split by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ca_core::Error> for Failure {
    fn from(e: ca_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Resolved invocation shared by every subcommand.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    /// Overrides as recorded in config snapshots, `--seed` included.
    pub overrides: Vec<String>,
    pub seed: u64,
    pub out: PathBuf,
    pub exec: Execution,
    verbosity: i8,
}

impl Ctx {
    pub fn info(&self, msg: impl AsRef<str>) {
        if self.verbosity >= 1 {
            eprintln!("ca: {}", msg.as_ref());
        }
    }

    pub fn debug(&self, msg: impl AsRef<str>) {
        if self.verbosity >= 2 {
            eprintln!("ca: {}", msg.as_ref());
        }
    }

    pub fn warn(&self, msg: impl AsRef<str>) {
        if self.verbosity >= 0 {
            eprintln!("ca: warning: {}", msg.as_ref());
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

fn load_config(g: &Global) -> Result<(ExperimentConfig, Vec<String>), Failure> {
    let mut cfg = match &g.config {
        Some(p) if !p.is_file() => {
            return Err(Failure::Usage(format!(
                "config file not found: {}",
                p.display()
            )));
        }
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("run.seeds={s}"));
    }
    cfg.apply_overrides(&overrides)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((cfg, overrides))
}

fn context(g: &Global) -> Result<Ctx, Failure> {
    let (cfg, overrides) = load_config(g)?;
    let seed = cfg.seeds[0];
    let verbosity = if g.quiet {
        -1
    } else {
        1 + g.verbose.min(8) as i8
    };
    let exec = if g.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    Ok(Ctx {
        cfg,
        overrides,
        seed,
        out: g.out.clone(),
        exec,
        verbosity,
    })
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let ctx = context(&cli.global)?;
    ctx.debug(format!(
        "seed {} out {} exec {:?}",
        ctx.seed,
        ctx.out.display(),
        ctx.exec
    ));
    match cli.command {
        Command::GenData => stages::gen_data(&ctx),
        Command::Train => stages::train(&ctx),
        Command::Synthesize => stages::synthesize(&ctx),
        Command::Amend { a } => stages::amend(&ctx, a.unwrap_or(ctx.cfg.a)),
        Command::Distill => stages::distill(&ctx),
        Command::Score { detectors } => stages::score(&ctx, &detectors),
        Command::Eval => stages::eval(&ctx),
        Command::Run => stages::run(&ctx),
        Command::AblateA { grid } => stages::ablate_a(&ctx, &grid),
        Command::AblateT { grid } => stages::ablate_t(&ctx, &grid),
        Command::Curves => stages::curves(&ctx),
        Command::Bound {
            a,
            n,
            t,
            r,
            k,
            delta,
        } => stages::bound(a, n, t, r, k, delta),
    }
}

pub fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "missing input {} (run the earlier stage first)",
            path.display()
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("ca: usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("ca: error: {e}");
            ExitCode::from(2)
        }
    }
}
