mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posesplat::evalmetrics::AlignMode;
use posesplat::selftest::Fault;
use posesplat::trainer::Ablation;

/// Pose-free feed-forward Gaussian splatting.
#[derive(Debug, Parser)]
#[command(name = "posesplat", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory. Defaults to `$POSESPLAT_OUT/<command>` (or
    /// `runs/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes as scene directories.
    Generate {
        /// Scene seeds: `a..b` (exclusive) or a comma list.
        #[arg(long, value_parser = parse_seeds, default_value = "0")]
        seeds: SeedList,
        /// TOML scene config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a model from a TOML config.
    Train {
        config: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated ablations.
        #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
        ablate: Vec<Ablation>,
        /// Stop after this many total steps.
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// One forward pass over a scene directory or image folder.
    Infer {
        checkpoint: PathBuf,
        input: PathBuf,
        /// Number of input views; defaults to the model's maximum.
        #[arg(long)]
        views: Option<usize>,
        /// Frame stride when picking views from a scene directory.
        #[arg(long, default_value_t = 1)]
        interval: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Focal length in output pixels for image folders.
        #[arg(long)]
        focal: Option<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Render a PLY from the cameras in a spec file.
    Render {
        ply: PathBuf,
        /// One camera per line: `fx fy cx cy | qr(4) qd(4)`.
        cameras: PathBuf,
        /// Image size; defaults to twice the principal point.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// 16-bit depth value per scene unit.
        #[arg(long, default_value_t = 1000.0)]
        depth_scale: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a checkpoint on held-out synthetic scenes.
    Eval {
        checkpoint: PathBuf,
        /// Test seeds: `a..b` (exclusive) or a comma list.
        #[arg(long, value_parser = parse_seeds, default_value = "1000..1010")]
        seeds: SeedList,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long, default_value_t = 2)]
        interval: usize,
        #[arg(long, default_value = "none", value_parser = parse_align)]
        align: AlignMode,
        #[command(flatten)]
        out: OutArg,
    },
    /// Gradient, mask, zero-init, dual-quaternion and renderer checks.
    Selftest {
        #[arg(long, default_value_t = 10)]
        grad_seeds: u64,
        #[arg(long, hide = true, value_parser = parse_fault)]
        inject_fault: Option<Fault>,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let bad = || format!("`{s}` is not a seed list (use `a..b` or `a,b,c`)");
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(SeedList(seeds))
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.trim().parse()
}

fn parse_align(s: &str) -> Result<AlignMode, String> {
    s.parse()
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    s.parse()
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numerical(e) => e,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage error",
            Failure::Data(_) => "data error",
            Failure::Numerical(_) => "numerical fault",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}: {:#}", f.label(), f.error());
            ExitCode::from(f.code())
        }
    }
}
