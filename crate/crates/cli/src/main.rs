//! `minkgeo`: batch front end for descriptor targets, surrogate training and
//! gradient diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        Self { code: 1, msg: e.to_string() }
    }
}

impl From<minkgeo::Error> for CliError {
    fn from(e: minkgeo::Error) -> Self {
        let code = if e.is_numerical() { 3 } else { 2 };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::validation(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "minkgeo", version, about = "Integral-geometric descriptors, surrogates and gradient diagnostics")]
struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// JSON settings file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Thread cap for internal parallelism.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Log more to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded corpus of multi-peak Gaussian rasters (mm/h).
    GenSynthetic(GenSyntheticArgs),
    /// Calibrate quantile thresholds (mm/h) and the log scale from a corpus.
    Calibrate(CalibrateArgs),
    /// Compute exact gamma vectors for every raster of a corpus.
    GenTargets(GenTargetsArgs),
    /// Train an emulator checkpoint on a target store.
    TrainEmulator(TrainArgs),
    /// Evaluate a checkpoint against a target store.
    EvalEmulator(EvalArgs),
    /// Invert a target gamma vector through a surrogate, starting from noise.
    Invert(InvertArgs),
    /// Compare reverse-mode and finite-difference surrogate gradients.
    Gradcheck(GradcheckArgs),
    /// Radially averaged power spectrum and spectral ratio of rasters.
    Raps(RapsArgs),
    /// Amplitude-perturbation sweep of a masked region.
    MechSweep(MechSweepArgs),
    /// Steiner-formula check on a rasterized disk.
    SteinerCheck(SteinerArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let ctx = Ctx {
        config: cli.config,
        workers: cli.workers,
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::GenTargets(a) => gen_targets(&ctx, a),
        Command::TrainEmulator(a) => train(&ctx, a),
        Command::EvalEmulator(a) => eval(&ctx, a),
        Command::Invert(a) => invert(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::Raps(a) => raps(&ctx, a),
        Command::MechSweep(a) => mech_sweep(&ctx, a),
        Command::SteinerCheck(a) => steiner(&ctx, a),
    };
    match result {
        Ok(summary) => {
            if cli.json {
                println!("{}", serde_json::to_string(&summary).unwrap_or_default());
            } else {
                println!("{}", human(&summary));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn human(v: &serde_json::Value) -> String {
    match v.as_object() {
        Some(m) => m
            .iter()
            .filter(|(_, x)| !x.is_array() && !x.is_object())
            .map(|(k, x)| format!("{k}: {x}"))
            .collect::<Vec<_>>()
            .join("\n"),
        None => v.to_string(),
    }
}
