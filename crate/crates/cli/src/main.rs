//! `mpe`: synthetic data, ingestion, training phases, sampling, packing,
//! evaluation and sweep reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpe_core::Phase;

#[derive(Parser)]
#[command(name = "mpe", version, about = "Mixed-precision embedding compression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled TSV log and its ground-truth weight sidecar.
    Synth {
        /// TOML synth spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the feature catalog and split the log.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Comma-separated field names; defaults to one per column.
        #[arg(long, value_delimiter = ',')]
        fields: Option<Vec<String>>,
    },
    /// Run one training phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.phase` in the config.
        #[arg(long)]
        phase: Option<Phase>,
        /// Search checkpoint; defaults to `out_dir/search/checkpoint.bin`.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Per-group widths; defaults to `out_dir/search/precision.tsv` when present.
        #[arg(long)]
        precision: Option<PathBuf>,
    },
    /// Read the final widths off a search checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Directory for `precision.tsv` and `precision.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bit-pack a trained table.
    Pack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Defaults to the widths stored in the checkpoint.
        #[arg(long)]
        precision: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUC and logloss of a packed file or checkpoint on one split.
    Eval {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        packed: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Consolidate phase results under a run directory, optionally running a
    /// lambda sweep first.
    Report {
        #[arg(long, required_unless_present = "config")]
        run_dir: Option<PathBuf>,
        /// Run config for the sweep; its `out_dir` is the default run directory.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', requires = "config")]
        lambdas: Vec<f64>,
    },
    /// Print the directory and sample codes of a packed file.
    Dump { packed: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Ingest {
            input,
            out,
            seed,
            dim,
            fields,
        } => commands::ingest(&input, &out, seed, dim, fields),
        Command::Train {
            config,
            phase,
            prior,
            precision,
        } => commands::train(&config, phase, prior, precision),
        Command::Sample {
            checkpoint,
            data_dir,
            out,
        } => commands::sample(&checkpoint, &data_dir, &out),
        Command::Pack {
            checkpoint,
            data_dir,
            precision,
            out,
        } => commands::pack(&checkpoint, &data_dir, precision.as_deref(), &out),
        Command::Eval {
            packed,
            checkpoint,
            data_dir,
            split,
        } => commands::eval(packed.as_deref(), checkpoint.as_deref(), &data_dir, &split),
        Command::Report {
            run_dir,
            config,
            lambdas,
        } => commands::report(run_dir, config.as_deref(), &lambdas),
        Command::Dump { packed } => commands::dump(&packed),
    }
}

/// Stable identifier for the error class, for scripts.
fn error_kind(err: &anyhow::Error) -> &'static str {
    use mpe_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Domain(_) => "domain",
                E::DimensionMismatch { .. } => "dimension_mismatch",
                E::InvalidBitWidth(_) => "invalid_bit_width",
                E::Malformed { .. } => "malformed_input",
                E::EmptyInput => "empty_input",
                E::InvalidArgument(_) => "invalid_argument",
                E::HashMismatch { .. } => "hash_mismatch",
                E::Format(_) => "bad_format",
                E::NonFiniteLoss { .. } => "non_finite_loss",
                E::SingleClass => "single_class",
                E::OutOfRange { .. } => "out_of_range",
                E::MissingPrerequisite(_) => "missing_prerequisite",
                E::Io(_) => "io",
                E::Json(_) => "json",
            };
        }
        if cause.is::<toml::de::Error>() {
            return "malformed_config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "other"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}").split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!(
                "error kind={} message={}",
                error_kind(&err),
                serde_json::to_string(&message).unwrap_or_default()
            );
            ExitCode::FAILURE
        }
    }
}
