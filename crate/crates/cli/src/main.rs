//! `poem`: train, apply and evaluate episodic memories of example orderings.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvalArgs, QuerySource, TrainArgs};
use config::{Invalid, Session, TaskConfig};

#[derive(Parser)]
#[command(
    name = "poem",
    version,
    about = "Learn in-context example orderings with an episodic memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Print machine-readable JSON.
    #[arg(long)]
    json: bool,
    /// Include wall-clock timings in reports.
    #[arg(long)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop and write a memory snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Memory snapshot to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write a snapshot after every iteration into this directory.
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Choose an ordering for new queries from a trained memory.
    Order {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        /// A single query text (fills the retrieval field).
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        query: Option<String>,
        /// JSONL file of query records.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Neighbours consulted per estimate; defaults to the config's k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Compare POEM against baseline orderings on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Use this memory instead of training one per seed.
        #[arg(long)]
        memory: Option<PathBuf>,
        /// First seed; defaults to the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Write raw and summary rows as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Summarize a memory snapshot.
    InspectMemory {
        #[arg(long)]
        memory: PathBuf,
        /// Show only the N most recently used states.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate a synthetic scenario end to end.
    Simulate {
        /// Scenario file (task geometry, landscape, training parameters).
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
}

fn open(config: &TaskConfig) -> anyhow::Result<Session> {
    Session::open(config.plan()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            snapshot_dir,
            output,
        } => {
            let session = open(&TaskConfig::load(&config)?)?;
            commands::train(
                &session,
                TrainArgs {
                    out: &out,
                    seed,
                    json: output.json,
                    timing: output.timing,
                    snapshot_dir: snapshot_dir.as_deref(),
                },
            )
        }
        Command::Order {
            config,
            memory,
            query,
            file,
            k,
            json,
        } => {
            let plan = TaskConfig::load(&config)?.plan()?;
            let memory = commands::load_memory(&memory)?;
            let session = Session::open(plan)?;
            let source = match (&query, &file) {
                (Some(q), _) => QuerySource::Text(q),
                (None, Some(f)) => QuerySource::File(f),
                (None, None) => unreachable!("clap requires one of --query/--file"),
            };
            commands::order(&session, &memory, source, k, json)
        }
        Command::Eval {
            config,
            memory,
            seed,
            seeds,
            out,
            output,
        } => {
            let session = open(&TaskConfig::load(&config)?)?;
            commands::eval(
                &session,
                EvalArgs {
                    memory: memory.as_deref(),
                    seed,
                    seeds,
                    json: output.json,
                    timing: output.timing,
                    out: out.as_deref(),
                },
            )
        }
        Command::InspectMemory { memory, top, json } => {
            commands::inspect_memory(&memory, json, top)
        }
        Command::Simulate {
            scenario,
            seed,
            seeds,
            out,
            output,
        } => {
            let session = open(&TaskConfig::for_scenario(&scenario))?;
            commands::eval(
                &session,
                EvalArgs {
                    memory: None,
                    seed,
                    seeds,
                    json: output.json,
                    timing: output.timing,
                    out: out.as_deref(),
                },
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
