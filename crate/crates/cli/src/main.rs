//! `tsam`: train, evaluate, ablate and inspect multi-modal link predictors.
//!
//! Any argument of the form `--section.key=value` (or `--section.key value`)
//! overrides the corresponding config key, wherever it appears.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tsam_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "tsam",
    version,
    about = "Multi-modal knowledge graph completion",
    after_help = "Config keys can be overridden with --section.key=value, e.g. --sacl.tau=0.1.\n\
                  TSAM_SEED overrides train.seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the best-validation checkpoint and a log.
    Train {
        /// Config file (`key = value` lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with filtered (default) or raw ranking.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Rank against every entity instead of filtering known answers.
        #[arg(long, conflicts_with = "filtered")]
        raw: bool,
        #[arg(long)]
        filtered: bool,
        /// Where to write `metric=value` lines; defaults to
        /// `<checkpoint>.<split>.<setting>.metrics`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every query's candidate scores to this file.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
    },
    /// Train and evaluate the five ablation variants with a shared seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the report and per-variant training logs.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Temperature and negative-count sensitivity runs.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.1,0.5")]
        taus: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "8,16")]
        ks: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with visual and textual token banks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        entities: usize,
        #[arg(long, default_value_t = 5)]
        relations: usize,
        #[arg(long, default_value_t = 200)]
        triples: usize,
        #[arg(long, default_value_t = 4)]
        tokens: usize,
        #[arg(long, default_value_t = 16)]
        token_dim: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Summarise a token bank or checkpoint.
    Inspect {
        path: PathBuf,
        /// Write fused entity vectors (checkpoints only).
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
    },
}

/// Splits config overrides out of the raw arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numeric() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match commands::run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
