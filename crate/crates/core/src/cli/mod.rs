//! Command-line pipeline: simulate, prepare, train, downscale, evaluate.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;
pub use config::PipelineConfig;

use crate::error::Error;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "BRIDGECAST_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "bridgecast", version, about = "Fluid snapshots, score training and diffusion-bridge downscaling")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config with [sim], [schedule], [unet], [train], [bridge], [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Psd,
    Kde,
    Condensation,
    L2,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the fluid model for one subset and write its snapshots.
    Simulate {
        #[arg(long)]
        subset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upsample and low-pass a low-resolution set onto the fine grid.
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the preprocessor and train a score model on a snapshot set.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for checkpoints, loss history and scaling.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bridge a prepared source set into the target domain.
    Downscale {
        /// Prepared (upsampled) source set.
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Target-domain set the model was trained on.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Switchover time, replacing the cached spectral estimate.
        #[arg(long = "t-star")]
        t_star: Option<f64>,
    },
    /// Compare snapshot sets.
    Evaluate {
        #[arg(long, value_enum)]
        metric: Metric,
        /// Sets to compare. For `l2`: outputs first, then their sources.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Maps an error onto the documented exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::AlreadyExists(_) => EXIT_USAGE,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
        Error::Shape(_) | Error::InvalidGrid(_) | Error::UnknownChannel(_) => EXIT_SHAPE,
        _ => EXIT_RUNTIME,
    }
}
