//! `diffeo`: generate synthetic diffeomorphisms, take logarithms, train and
//! evaluate the autoencoder, and run log-Euclidean statistics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence
//! under `--strict`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use diffeo_core::field::Grid2;

mod commands;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NON_CONVERGENCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "diffeo", version, about = "Log-Euclidean tools for 2D deformation fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogMethod {
    Iss,
    Leda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PcaSource {
    Logmaps,
    Latents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WalkMode {
    Random,
    RegressionTop,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with ground-truth velocities.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        /// Grid size as HxW (or a single side length).
        #[arg(long, default_value = "32x32", value_parser = parse_size)]
        size: Grid2,
        #[arg(long, default_value_t = 3.0)]
        max_disp: f64,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Logarithm of a deformation field.
    Log {
        #[arg(long, value_enum)]
        method: LogMethod,
        #[arg(long)]
        field: PathBuf,
        #[arg(long, required_if_eq("method", "leda"))]
        model: Option<PathBuf>,
        /// Number of square roots (ISS); must match the model's stages for leda.
        #[arg(long)]
        n_roots: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        /// Fail with exit code 3 when a square root does not converge.
        #[arg(long)]
        strict: bool,
    },
    /// Exponential of a velocity field.
    Exp {
        #[arg(long)]
        velocity: PathBuf,
        /// Integrate the flow with RK4 instead of scaling and squaring.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        latent: usize,
        #[arg(long, default_value_t = 4)]
        stages: u32,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Leave the last N pairs out of training.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model and write a JSON report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate only the last N pairs (0 = all).
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        /// Also time ISS against amortized inference.
        #[arg(long)]
        timing: bool,
    },
    /// PCA of log maps or latents.
    Pca {
        #[arg(long, value_enum)]
        source: PcaSource,
        #[arg(long)]
        data: PathBuf,
        /// Log maps come from this model when given, otherwise from ISS.
        #[arg(long, required_if_eq("source", "latents"))]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write mode-of-variation renders into this directory.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Regress a covariate on latents.
    Regress {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        covariate: String,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a line of latents and render every step.
    Walk {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: WalkMode,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        render: PathBuf,
        /// Regression JSON from `regress`, for `--mode regression-top`.
        #[arg(long, required_if_eq("mode", "regression-top"))]
        regression: Option<PathBuf>,
        /// Start from the mean latent of this dataset instead of zero.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        line_every: usize,
    },
    /// Render a field as a warped grid and a log-det Jacobian map.
    Render {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out_grid: PathBuf,
        #[arg(long)]
        out_logdet: PathBuf,
        #[arg(long, default_value_t = 4)]
        line_every: usize,
    },
}

fn parse_size(s: &str) -> Result<Grid2, String> {
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h, w),
        None => (s, s),
    };
    let side = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {s:?}: {e}"));
    Grid2::new(side(h)?, side(w)?).map_err(|e| e.to_string())
}

/// A failed run: message for stderr plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(err: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: err.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
