//! `gpemu` command-line front end: fit emulators, predict, calibrate and
//! diagnose from CSV and JSON files.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
//! failure.

mod commands;
mod config;
pub mod table;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{CalibrateConfig, FitFileConfig, KernelConfig, RunInfo, SimulatorConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}, line {line}: {message}")]
    Csv { path: String, line: u64, message: String },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Core(#[from] gpemu_core::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gpemu", version, about = "Gaussian process emulation and calibration")]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a scalar (one output column) or vector emulator.
    Fit(FitArgs),
    /// Student-t predictions of a fitted emulator at test inputs.
    Predict(PredictArgs),
    /// Sample the calibration posterior.
    Calibrate(CalibrateArgs),
    /// Report on a model JSON or a chain CSV.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Design inputs, one row per run.
    #[arg(long)]
    design: PathBuf,
    /// Simulator outputs, one column per output coordinate.
    #[arg(long, alias = "output")]
    outputs: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model JSON; the fit report goes next to it as `<stem>.report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Cover a noisy observation rather than the latent output.
    #[arg(long)]
    include_noise: bool,
    /// Central interval level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Field data: input columns plus the observation column (default `y`).
    #[arg(long)]
    design: PathBuf,
    /// Observations in a separate single-column file.
    #[arg(long, alias = "outputs")]
    output: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Chain CSV; the summary goes next to it as `<stem>.summary.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Model JSON or chain CSV.
    #[arg(long)]
    model: PathBuf,
    /// Report JSON (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a.design, &a.outputs, a.config.as_deref(), a.seed, &a.out),
        Command::Predict(a) => commands::predict(&a.model, &a.test, a.include_noise, a.level, &a.out),
        Command::Calibrate(a) => {
            commands::calibrate(&a.design, a.output.as_deref(), &a.config, a.seed, &a.out)
        }
        Command::Diagnose(a) => commands::diagnose(&a.model, a.out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// `dir/stem.suffix` next to `path`.
pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}
