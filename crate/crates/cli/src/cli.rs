//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fdnas_core::federation::ClusterKey;

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "fdnas", version, about = "Federated direct neural architecture search at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config (default `out`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for device updates.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue from a checkpoint (search only).
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, out: self.out.clone(), workers: self.workers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KeyArg {
    Data,
    Hardware,
}

impl From<KeyArg> for ClusterKey {
    fn from(k: KeyArg) -> Self {
        match k {
            KeyArg::Data => ClusterKey::Data,
            KeyArg::Hardware => ClusterKey::Hardware,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset cache, partition manifest and latency tables.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Run the federated supernet search.
    Search {
        #[command(flatten)]
        common: Common,
        /// Total communication rounds, overriding the config.
        #[arg(long)]
        rounds: Option<usize>,
        /// Stop once this many rounds are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Adapt the searched supernet separately per device cluster.
    ClusterSearch {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint (default `<out>/search/checkpoint.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Adaptation rounds per cluster, overriding the config.
        #[arg(long)]
        rounds: Option<usize>,
        /// Device tag that defines clusters.
        #[arg(long, value_enum)]
        key: Option<KeyArg>,
    },
    /// Derive the compact architecture from a supernet checkpoint.
    Derive {
        #[command(flatten)]
        common: Common,
        /// Supernet checkpoint (default `<out>/search/checkpoint.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Architecture JSON to write (default `<out>/arch.json`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a derived architecture from scratch with federated averaging.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Architecture JSON (default `<out>/arch.json`).
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Rounds, overriding the config.
        #[arg(long)]
        rounds: Option<usize>,
        /// Comma-separated device ids to train on (default all).
        #[arg(long, value_delimiter = ',')]
        devices: Option<Vec<usize>>,
        /// Output directory (default `<out>/finetune`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Measure accuracy, size and latency of a fine-tuned net.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `finetune` (default `<out>/finetune`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated device ids to evaluate on (default all).
        #[arg(long, value_delimiter = ',')]
        devices: Option<Vec<usize>>,
        /// Metrics JSON to write (default `<out>/eval/metrics.json`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize evaluated runs into `<out>/report.csv`.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directories of evaluated runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Gen { common }
            | Command::Search { common, .. }
            | Command::ClusterSearch { common, .. }
            | Command::Derive { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Search { .. } => "search",
            Command::ClusterSearch { .. } => "cluster-search",
            Command::Derive { .. } => "derive",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}
