//! `refi`: fingerprint graphs, train the detector on labeled sources and
//! score unseen targets.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 when a
//! run fails at runtime (I/O, divergence).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::LevelFilter;
use thiserror::Error;

pub mod ablate;
pub mod commands;
pub mod config;
pub mod logging;

use config::ConfigArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] refi_core::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use refi_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Diverged { .. } | E::NonFinite(_) | E::Backward(_) | E::Shape { .. } => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "refi", version, about = "Relational fingerprints for few-shot graph anomaly detection")]
pub struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled graph bundle.
    Synth {
        /// JSON spec; fields not given fall back to the family preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        family: Option<commands::FamilyArg>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the rank-normalized fingerprint matrix of a graph.
    Fingerprint {
        #[arg(long, alias = "graph")]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        drop: Vec<refi_core::fingerprint::Dim>,
        #[arg(long)]
        allow_multi_drop: bool,
        #[arg(long)]
        normalize_similarity: bool,
        /// Write RFGF float32 binary instead of CSV.
        #[arg(long)]
        binary: bool,
    },
    /// Train on labeled source graphs.
    Train {
        /// Comma-separated manifest paths.
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode history CSV (default: <out>.history.csv).
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a labeled target with resampled supports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score every non-support node of a target given a labeled support set.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// CSV with header `node,label`.
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write final node representations for a target to CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate the ablation variants.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        /// Table as JSON; a CSV copy is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Only run these variants (full, wo-d, drop-np, ...).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("REFI_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("REFI_THREADS must be a non-negative integer, got {raw:?}")))?;
    // A second call in the same process keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    logging::init(cli.log_level);
    let result = configure_threads().and_then(|_| commands::dispatch(cli.command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            if log::log_enabled!(log::Level::Error) {
                log::error!("{e}");
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
