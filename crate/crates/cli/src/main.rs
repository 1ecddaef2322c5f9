mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use config::{BackendKind, FlagOverrides, RunConfig, LOG_ENV};

/// Failures with their own exit codes. Anything else exits with 1.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration: {0}")]
    Config(String),
    #[error("protocol {0} is not frozen; run phase1 first")]
    NotFrozen(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::NotFrozen(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "careloop", version, about = "Dual-memory clinical next-action prediction")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// JSONL script for the mock backend.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; defaults to runs/<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace a nonempty output directory.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse clinical tables into a normalized event stream.
    Ingest {
        #[arg(long)]
        diagnoses: Option<PathBuf>,
        #[arg(long)]
        medications: Option<PathBuf>,
        #[arg(long)]
        labs: Option<PathBuf>,
        #[arg(long)]
        procedures: Option<PathBuf>,
        /// Events already in JSONL form, merged with the tables.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Tables are tab separated.
        #[arg(long)]
        tsv: bool,
    },
    /// Group events into windowed bundles and write the serialized corpus.
    Bundle {
        #[arg(long)]
        events: PathBuf,
    },
    /// Induce and freeze the global protocol from a training corpus.
    Phase1 {
        #[arg(long)]
        corpus: PathBuf,
        /// Open protocol to extend.
        #[arg(long)]
        seed_protocol: Option<PathBuf>,
    },
    /// Prequential evaluation under a frozen protocol.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        /// Phase-1 manifest naming the training corpus; defaults to the one next to the protocol.
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        /// Score predictions with the judge template.
        #[arg(long)]
        judge: bool,
    },
    /// Print a protocol's rules grouped by category.
    Inspect {
        #[arg(long)]
        protocol: PathBuf,
    },
    /// Write the synthetic demo corpora, protocols and mock scripts.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        /// Random stays added beside the sepsis stay.
        #[arg(long, default_value_t = 6)]
        stays: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Bundle { .. } => "bundle",
            Command::Phase1 { .. } => "phase1",
            Command::Eval { .. } => "eval",
            Command::Inspect { .. } => "inspect",
            Command::Synth { .. } => "synth",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let flags = FlagOverrides {
        backend: cli.backend,
        mock_script: cli.mock_script,
        workers: cli.workers,
    };
    let mut config = RunConfig::load(cli.config.as_deref(), std::env::vars(), &flags)?;
    let out = cli.out.unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    match cli.command {
        Command::Inspect { protocol } => commands::inspect(&protocol),
        Command::Ingest {
            diagnoses,
            medications,
            labs,
            procedures,
            events,
            tsv,
        } => {
            let ctx = commands::Ctx { config, out, overwrite: cli.overwrite };
            let args = commands::IngestArgs {
                diagnoses: diagnoses.as_deref(),
                medications: medications.as_deref(),
                labs: labs.as_deref(),
                procedures: procedures.as_deref(),
                events: events.as_deref(),
                tsv,
            };
            commands::ingest(&ctx, args)
        }
        Command::Bundle { events } => commands::bundle(&commands::Ctx { config, out, overwrite: cli.overwrite }, &events),
        Command::Phase1 { corpus, seed_protocol } => {
            commands::phase1(&commands::Ctx { config, out, overwrite: cli.overwrite }, &corpus, seed_protocol.as_deref())
        }
        Command::Eval {
            corpus,
            protocol,
            train_manifest,
            judge,
        } => {
            config.eval.judge |= judge;
            let ctx = commands::Ctx { config, out, overwrite: cli.overwrite };
            commands::eval(&ctx, &corpus, &protocol, train_manifest.as_deref())
        }
        Command::Synth { seed, stays } => {
            if let Some(seed) = seed {
                config.seed = seed;
            }
            commands::synth_cmd(&commands::Ctx { config, out, overwrite: cli.overwrite }, stays)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Failure>().map_or(1, Failure::exit_code);
            ExitCode::from(code)
        }
    }
}
