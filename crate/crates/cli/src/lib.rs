//! `csen` command-line driver.
//!
//! Every command resolves its configuration, writes `resolved_config.json`
//! and `run_info.json` into its output directory and only then starts work.
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod verify;

pub use config::{Profile, RunConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<csen_core::Error> for CliError {
    fn from(e: csen_core::Error) -> Self {
        match e {
            csen_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "csen", version, about = "Dual-encoder vehicle re-identification on a desk budget")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config merged over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting defaults: full, desk or smoke.
    #[arg(long, default_value = "full")]
    pub profile: Profile,
    /// Dotted override such as `train.epochs=4`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; evaluates on query/gallery when present.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest (overrides `data` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reduced model: no-sem, no-afem, no-cv or baseline.
        #[arg(long)]
        ablate: Option<csen_core::model::Ablation>,
        /// Continue from a checkpoint written by an identical configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the query/gallery split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Apply k-reciprocal re-ranking (`eval.rerank`, or its defaults).
        #[arg(long)]
        rerank: bool,
    },
    /// Report plain and re-ranked retrieval side by side.
    Rerank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per AFEM group count.
    AblateGroups {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128")]
        groups: Vec<usize>,
    },
    /// Train and evaluate full and baseline models under each metric loss.
    AblateLoss {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metric losses to pair with cross-entropy.
        #[arg(long, value_delimiter = ',', default_value = "supcon,triplet")]
        metrics: Vec<String>,
    },
    /// Write final features as JSON lines for external plotting.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// train, query, gallery or all.
        #[arg(long, default_value = "all")]
        split: String,
        /// Keep only this many identities, drawn with `train.seed`.
        #[arg(long)]
        ids: Option<usize>,
    },
    /// Run the oracle suite; nonzero exit on any failure.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scale one op's backward pass, as `op:factor`.
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

/// Caps the global worker pool from `CSEN_THREADS`; returns the cap.
pub fn init_threads() -> Result<Option<usize>, CliError> {
    let Ok(raw) = std::env::var("CSEN_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("CSEN_THREADS must be a positive integer, got `{raw}`")))?;
    // A pool that already exists (tests calling in twice) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    commands::dispatch(cli.command)
}
