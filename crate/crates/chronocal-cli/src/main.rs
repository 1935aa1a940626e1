//! Command-line entry point: argument parsing, worker-pool setup, dispatch.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure (the message
//! names the path), 64 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chronocal::driftfit::ReferencePolicy;

mod manifest;
mod stages;

use stages::{AnalysisOverrides, CliError};

/// Drift calibration for single-photon imaging arrays: simulate correlated
/// photon streams, histogram coincidence delays per pixel and code group,
/// fit per-pixel drift curves, and build and apply correction tables.
#[derive(Parser)]
#[command(name = "chronocal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Analysis parameters; each flag mirrors a config key and wins over it.
#[derive(Args)]
struct AnalysisFlags {
    /// TDC codes per histogram group.
    #[arg(long, value_name = "CODES")]
    group_size: Option<u16>,

    /// Histogram section width, picoseconds.
    #[arg(long, value_name = "PS")]
    section_ps: Option<u32>,

    /// Coincidence window half-width, picoseconds.
    #[arg(long = "window-ps", value_name = "PS")]
    window_ps: Option<u64>,

    /// Minimum coincidences a code group needs to enter the fit.
    #[arg(long, value_name = "N")]
    min_counts: Option<u64>,

    /// Drift-curve polynomial degree.
    #[arg(long, value_name = "DEGREE")]
    poly_degree: Option<usize>,

    /// Alignment target: weighted-mean, median, or fixed:<PS>.
    #[arg(long, value_name = "POLICY")]
    reference_policy: Option<ReferencePolicy>,
}

impl AnalysisFlags {
    fn overrides(&self) -> AnalysisOverrides {
        AnalysisOverrides {
            group_size: self.group_size,
            section_ps: self.section_ps,
            window_ps: self.window_ps,
            min_counts: self.min_counts,
            poly_degree: self.poly_degree,
            reference_policy: self.reference_policy,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize reference and imager event files from a config.
    Simulate {
        /// Run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,

        /// Override the config's RNG seed.
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,

        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Histogram imager-minus-reference delays per pixel and code group.
    Coincide {
        /// Imager event file(s); several measurement chunks merge into one
        /// histogram set.
        #[arg(value_name = "IMAGER", required = true, num_args = 1..)]
        imager: Vec<PathBuf>,

        /// Reference event file.
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,

        /// Run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,

        #[command(flatten)]
        analysis: AnalysisFlags,

        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Fit per-pixel drift curves from a histogram file.
    Fit {
        /// Histogram set written by `coincide`.
        #[arg(value_name = "HISTOGRAMS")]
        histograms: PathBuf,

        /// Run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,

        #[command(flatten)]
        analysis: AnalysisFlags,

        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Build the per-pixel, per-code correction table from fitted curves.
    Lut {
        /// Fitted models written by `fit`.
        #[arg(value_name = "MODELS")]
        models: PathBuf,

        /// Run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,

        #[command(flatten)]
        analysis: AnalysisFlags,

        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Rewrite an imager event file with corrected timestamps.
    Apply {
        /// Imager event file to correct.
        #[arg(value_name = "EVENTS")]
        events: PathBuf,

        /// Correction table (lut.json) written by `lut`.
        #[arg(long, value_name = "FILE")]
        lut: PathBuf,

        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Measure aggregate peak shapes before and after correction.
    Report {
        /// Uncorrected imager event file.
        #[arg(long, value_name = "FILE")]
        uncorrected: PathBuf,

        /// Optional first-order-corrected imager event file.
        #[arg(long, value_name = "FILE")]
        linear: Option<PathBuf>,

        /// Corrected imager event file.
        #[arg(long, value_name = "FILE")]
        corrected: PathBuf,

        /// Reference event file.
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,

        /// Run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,

        #[command(flatten)]
        analysis: AnalysisFlags,

        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },

    /// Run the whole chain: simulate, coincide, fit, build and apply the
    /// table, and report peak shapes (with a first-order baseline).
    Pipeline {
        /// Run configuration (TOML).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,

        /// Override the config's RNG seed.
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,

        #[command(flatten)]
        analysis: AnalysisFlags,

        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Cap the worker pool when CHRONOCAL_THREADS is set.
fn init_worker_pool() {
    let Ok(value) = std::env::var("CHRONOCAL_THREADS") else {
        return;
    };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("warning: worker pool already initialized: {e}");
            }
        }
        _ => eprintln!(
            "warning: ignoring CHRONOCAL_THREADS={value:?} (expected a positive integer)"
        ),
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, seed, out } => stages::cmd_simulate(&config, seed, &out),
        Command::Coincide {
            imager,
            reference,
            config,
            analysis,
            out,
        } => stages::cmd_coincide(
            &imager,
            &reference,
            config.as_deref(),
            &analysis.overrides(),
            &out,
        ),
        Command::Fit {
            histograms,
            config,
            analysis,
            out,
        } => stages::cmd_fit(&histograms, config.as_deref(), &analysis.overrides(), &out),
        Command::Lut {
            models,
            config,
            analysis,
            out,
        } => stages::cmd_lut(&models, config.as_deref(), &analysis.overrides(), &out),
        Command::Apply { events, lut, out } => stages::cmd_apply(&events, &lut, &out),
        Command::Report {
            uncorrected,
            linear,
            corrected,
            reference,
            config,
            analysis,
            out,
        } => stages::cmd_report(
            &uncorrected,
            linear.as_deref(),
            &corrected,
            &reference,
            config.as_deref(),
            &analysis.overrides(),
            &out,
        ),
        Command::Pipeline {
            config,
            seed,
            analysis,
            out,
        } => stages::cmd_pipeline(&config, seed, &analysis.overrides(), &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_worker_pool();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
