//! Command-line driver for domain-adaptation experiments.
//!
//! Exit codes: 0 success, 1 usage or spec errors, 2 data/format errors,
//! 3 numerical failures.

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use tpn_core::Error;

#[derive(Parser)]
#[command(name = "tpn", version, about = "Prototypical-network domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run spec and write log, checkpoint, and summary
    Train {
        /// Run spec file (TOML, or JSON with a .json extension)
        #[arg(long)]
        spec: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several specs over a seed list and tabulate target accuracy
    Compare {
        /// Spec files; dataset and model blocks must be identical
        #[arg(long = "spec", required = true)]
        specs: Vec<PathBuf>,
        /// Comma-separated seed list
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Optional CSV output path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed a dataset under a trained checkpoint and dump CSV coordinates
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Spec supplying the dataset block
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a spec's synthetic dataset as CSV
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check suites
    Check,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Format { .. } | Error::Io(_) | Error::Shape { .. } => 2,
        Error::Domain { .. } | Error::NonFinite { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match &cli.command {
        Command::Train { spec, out, seed } => commands::cmd_train(spec, out, *seed),
        Command::Compare { specs, seeds, out } => {
            commands::cmd_compare(specs, seeds, out.as_deref())
        }
        Command::DumpEmbeddings {
            checkpoint,
            spec,
            out,
        } => commands::cmd_dump_embeddings(checkpoint, spec, out),
        Command::GenData { spec, out } => commands::cmd_gen_data(spec, out),
        Command::Check => commands::cmd_check(),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
