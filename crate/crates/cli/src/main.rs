//! `ctsrec`: ingest interaction logs, train and evaluate the temporal
//! recommender, probe the learned time kernel and export attention weights.

mod commands;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ctsrec::EvalMode;

#[derive(Parser, Debug)]
#[command(name = "ctsrec", version, about = "Continuous-time sequential recommendation")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed_init: Option<u64>,
    #[arg(long, global = true)]
    pub seed_sampler: Option<u64>,
    #[arg(long, global = true)]
    pub seed_negatives: Option<u64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Candidate set for ranking: `full` or `sampled:K`.
    #[arg(long, global = true)]
    pub mode: Option<EvalMode>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Run subdirectory; defaults to a hash of the data, model, training and seed settings.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse an interaction file and write the id mapping and dense interactions.
    Ingest {
        /// Overrides `data.path`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Overrides `data.delimiter`.
        #[arg(long)]
        delimiter: Option<char>,
    },
    /// Write the planted cohort dataset as a tab-separated interaction file.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Train on the chronological training split and save a checkpoint.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Also write the top-K ranked items for every test interaction.
        #[arg(long, default_value_t = 0)]
        top: usize,
    },
    /// Dump the time kernel ψ(t1 - t2) for `t1:t2` pairs.
    ProbeTime {
        #[arg(long, value_delimiter = ',', required = true)]
        pairs: Vec<String>,
        /// Probe these frequencies instead of a checkpoint's.
        #[arg(long, value_delimiter = ',')]
        omega: Vec<f64>,
        /// Pairs are raw seconds, mapped through the checkpoint's time normalization.
        #[arg(long)]
        seconds: bool,
    },
    /// Attention weights of a user's top layer at time offsets such as `+5d`.
    ExportAttention {
        /// Raw user id as it appears in the data file.
        #[arg(long)]
        user: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        offsets: Vec<String>,
        /// Base time in raw seconds; defaults to the user's last interaction.
        #[arg(long)]
        at: Option<f64>,
    },
    /// Train and evaluate every combination of the `[sweep]` value lists.
    Sweep,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    commands::run(cli)
}
