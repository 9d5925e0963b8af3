//! `gridcorr`: data generation, training, evaluation and diagnostics for the
//! coarse-grid PDE solver toolkit.
//!
//! Exit codes: 0 success, 2 configuration/schema error, 3 numerical
//! divergence, 4 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridcorr::error::Error;
use gridcorr::pde::SystemKind;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "gridcorr",
    version,
    about = "Trainable coarse-grid PDE solver: learnable symmetric stencils, RK4 marching, spectral correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted fields fall back to the system preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// System preset: burgers | gray_scott | fitzhugh_nagumo | navier_stokes.
    #[arg(long, value_parser = parse_system)]
    system: Option<SystemKind>,
}

impl ConfigArgs {
    fn resolve(&self) -> gridcorr::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), self.system)
    }
}

fn parse_system(s: &str) -> Result<SystemKind, String> {
    match s {
        "burgers" => Ok(SystemKind::Burgers),
        "gray_scott" | "gs" => Ok(SystemKind::GrayScott),
        "fitzhugh_nagumo" | "fn" => Ok(SystemKind::FitzhughNagumo),
        "navier_stokes" | "ns" => Ok(SystemKind::NavierStokes),
        other => Err(format!(
            "unknown system {other:?}; expected burgers, gray_scott, fitzhugh_nagumo or navier_stokes"
        )),
    }
}

/// Inclusive seed range `a..b`, or a single seed `a`.
#[derive(Debug, Clone)]
struct SeedRange(Vec<u64>);

impl std::str::FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some((a, b)) = s.split_once("..") {
            let lo: u64 = a.trim().parse().map_err(|e| format!("bad seed {a:?}: {e}"))?;
            let hi: u64 = b.trim().parse().map_err(|e| format!("bad seed {b:?}: {e}"))?;
            if hi < lo {
                return Err(format!("empty seed range {s:?}"));
            }
            Ok(SeedRange((lo..=hi).collect()))
        } else {
            let one: u64 = s.trim().parse().map_err(|e| format!("bad seed {s:?}: {e}"))?;
            Ok(SeedRange(vec![one]))
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate reference trajectories (one GCT1 file per seed plus a manifest).
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed or inclusive range, e.g. `7` or `1..10`.
        #[arg(long)]
        seeds: SeedRange,
    },
    /// Train the coarse model on generated trajectories.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding manifest.json and trajectory files.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Resume from an existing checkpoint (continues the step counter).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss-log CSV path (default: `<ckpt stem>_loss.csv`).
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Roll out a checkpoint over every test trajectory and report metrics.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding manifest.json and trajectory files.
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV output path.
        #[arg(long)]
        metrics: PathBuf,
        /// Report HCT as contiguous time before the first correlation drop
        /// instead of the indicator sum.
        #[arg(long)]
        contiguous: bool,
    },
    /// Autoregressively roll out from the first snapshot of an IC file.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        /// GCT1 file whose first snapshot is the initial condition.
        #[arg(long)]
        ic: PathBuf,
        #[arg(long)]
        steps: usize,
        /// Output GCT1 trajectory (steps + 1 snapshots).
        #[arg(long)]
        out: PathBuf,
    },
    /// Moment table and constraint residuals of the symmetric filter.
    VerifyFilter {
        /// Read filter parameters from a checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Or give them directly: seven comma-separated values a1..a7.
        #[arg(long)]
        params: Option<String>,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kinetic energy spectra of a trajectory file.
    Spectra {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit one spectrum per snapshot instead of the time average.
        #[arg(long)]
        per_snapshot: bool,
    },
}

fn run(command: Command) -> gridcorr::Result<()> {
    match command {
        Command::Gen { config, out, seeds } => {
            let cfg = config.resolve()?;
            commands::cmd_gen(&cfg, &out, &seeds.0)
        }
        Command::Train {
            config,
            data,
            ckpt,
            resume,
            loss_log,
        } => {
            let cfg = config.resolve()?;
            commands::cmd_train(&cfg, &data, &ckpt, resume.as_deref(), loss_log.as_deref())
        }
        Command::Eval {
            ckpt,
            data,
            metrics,
            contiguous,
        } => commands::cmd_eval(&ckpt, &data, &metrics, contiguous),
        Command::Rollout {
            ckpt,
            ic,
            steps,
            out,
        } => commands::cmd_rollout(&ckpt, &ic, steps, &out),
        Command::VerifyFilter { ckpt, params, out } => {
            commands::cmd_verify_filter(ckpt.as_deref(), params.as_deref(), out.as_deref())
        }
        Command::Spectra {
            traj,
            out,
            per_snapshot,
        } => commands::cmd_spectra(&traj, &out, per_snapshot),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 4,
        Error::Diverged { .. } | Error::NonFiniteStage { .. } | Error::Unstable { .. } => 3,
        Error::Train { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
