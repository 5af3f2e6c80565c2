//! `flowinterp`: synthesize phantoms, interpolate frame pairs, register
//! volumes and score results.
//!
//! Exit status: 0 on success, 2 on usage or validation errors, 3 when the
//! optimization hits a non-finite value.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use flowinterp::flow::Mode;
use flowinterp::interpolate::MergeKind;
use flowinterp::phantom::TimeProfile;

#[derive(Debug, Parser)]
#[command(name = "flowinterp", version, about = "Continuous-motion 4D frame interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic sequence with known motion.
    Phantom(PhantomArgs),
    /// Fit a motion model to a frame pair and synthesize intermediate frames.
    Interp(InterpArgs),
    /// Score predicted frames against reference frames.
    Eval(EvalArgs),
    /// Fit a motion model and export both displacement fields.
    Register(RegisterArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Linear,
    Sinusoidal,
}

impl From<ProfileArg> for TimeProfile {
    fn from(p: ProfileArg) -> TimeProfile {
        match p {
            ProfileArg::Linear => TimeProfile::Linear,
            ProfileArg::Sinusoidal => TimeProfile::Sinusoidal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MergeArg {
    Linear,
    Average,
}

impl From<MergeArg> for MergeKind {
    fn from(m: MergeArg) -> MergeKind {
        match m {
            MergeArg::Linear => MergeKind::Linear,
            MergeArg::Average => MergeKind::Average,
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: flowinterp::Error| e.to_string())
}

#[derive(Debug, clap::Args)]
struct PhantomArgs {
    /// Output directory for frames and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Intermediate frames between t = 0 and t = 1.
    #[arg(long, default_value_t = 3)]
    frames: usize,
    /// Phantom parameters as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Edge length of a cubic volume.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Debug, clap::Args)]
struct InterpArgs {
    #[arg(long)]
    frame0: Option<PathBuf>,
    #[arg(long)]
    frame1: Option<PathBuf>,
    /// Intermediate frames to synthesize.
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Run configuration as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// cpt, spatial-only, grid-velocity or grid.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    merge: Option<MergeArg>,
    /// Use only the branch warped from the second frame.
    #[arg(long)]
    one_way: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    truth_dir: PathBuf,
    /// Where to write the metrics JSON.
    #[arg(long)]
    report: PathBuf,
    /// Intensity peak for PSNR.
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

#[derive(Debug, clap::Args)]
struct RegisterArgs {
    #[arg(long)]
    frame0: Option<PathBuf>,
    #[arg(long)]
    frame1: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the displacement fields and report.
    #[arg(long)]
    out_dvf: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Interp(a) => commands::interp(a),
        Command::Eval(a) => commands::eval(a),
        Command::Register(a) => commands::register(a),
    };
    if let Err(e) = result {
        log::error!("{e}");
        std::process::exit(e.exit_code());
    }
}
