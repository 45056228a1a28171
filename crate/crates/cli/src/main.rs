//! Command-line entry point: one subcommand per experiment stage, one JSON
//! config plus flag overrides, all artifacts under a digest-named run dir.

mod commands;
mod config;
mod figures;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vital_core::model::NmTokenMode;

use config::RunConfig;

/// Failures split by whose fault they are: bad inputs exit 1, everything
/// that breaks mid-flight exits 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation(m) | Self::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(
    name = "vital",
    version,
    about = "Train and probe a frozen-backbone classifier for irregular clinical time series"
)]
struct Cli {
    /// Path to a JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the experiment seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root directory for run outputs (overrides env and config).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Overwrite artifacts that already exist in the run directory.
    #[arg(long, global = true)]
    force: bool,

    /// Size of the global worker pool; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AblateKind {
    /// Compare trainable / zero / random not-measured tokens.
    Token,
    /// Compare sentinel vocabulary words for masked rows.
    Word,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and write it as a dataset bundle.
    Synth,
    /// Ingest a directory of pipe-separated per-patient files into a bundle.
    Ingest {
        /// Directory holding one .psv file per patient.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train a model and write checkpoint, history, and metrics.
    Train {
        /// Overrides the not-measured token mode (trainable|zero|random).
        #[arg(long)]
        mode: Option<NmTokenMode>,
        /// Overrides the vocabulary word used for masked rows.
        #[arg(long)]
        missing_word: Option<String>,
    },
    /// Evaluate a checkpoint on one split and write a metrics report.
    Eval {
        /// Checkpoint path; defaults to checkpoint.bin in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sweep sensor removal and report the AUROC decline curve.
    Robustness {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict removal to the sparse (lab) pool only.
        #[arg(long)]
        lab_only: bool,
        /// Comma-separated removal ratios, overriding the config.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Retrain across seeds while varying one design choice.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblateKind,
    },
    /// Export attention heatmaps and PCA scatter data for a checkpoint.
    ExportFigures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    GradCheck,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    // Subcommand flags fold into the config before the digest is taken so
    // the run directory names the effective settings, not the file's.
    match &cli.command {
        Command::Train { mode, missing_word } => {
            if let Some(mode) = mode {
                cfg.model.nm_mode = *mode;
            }
            if let Some(word) = missing_word {
                cfg.model.missing_word = word.clone();
            }
        }
        Command::Robustness { ratios: Some(ratios), .. } => {
            cfg.ratios = ratios.clone();
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot size worker pool: {e}")))?;
    }
    let cfg = effective_config(cli)?;
    let run_dir = runs::RunDir::resolve(&cfg, cli.output.as_deref())?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg, &run_dir, cli.force),
        Command::Ingest { dir } => commands::ingest(&cfg, &run_dir, dir, cli.force),
        Command::Train { .. } => commands::train(&cfg, &run_dir, cli.force),
        Command::Eval { checkpoint, split } => {
            commands::eval(&cfg, &run_dir, checkpoint.as_deref(), split, cli.force)
        }
        Command::Robustness { checkpoint, lab_only, .. } => {
            commands::robustness(&cfg, &run_dir, checkpoint.as_deref(), *lab_only, cli.force)
        }
        Command::Ablate { kind } => commands::ablate(&cfg, &run_dir, *kind, cli.force),
        Command::ExportFigures { checkpoint } => {
            commands::export_figures(&cfg, &run_dir, checkpoint.as_deref(), cli.force)
        }
        Command::GradCheck => commands::grad_check(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // Bad flags are the caller's mistake, same class as a bad config.
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version land here.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
