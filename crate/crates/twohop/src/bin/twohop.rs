//! Thin CLI over the `twohop` library: dataset generation, training,
//! reduced-program solves, complexity sweeps, and checkpoint diagnostics.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use twohop::harness::{
    cmd_analyze, cmd_gen, cmd_sweep, cmd_theory, cmd_train, HarnessError, RunConfig, SweepConfig,
};
use twohop::taskgen::DatasetSpec;
use twohop::theory::Program;

#[derive(Parser)]
#[command(name = "twohop", version, about = "Identity-bridge two-hop composition laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProgramArg {
    Id,
    Noid,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file from a spec (JSON config or flags).
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        complexity: usize,
        #[arg(long, default_value_t = true)]
        identity: std::primitive::bool,
    },
    /// Train a model per a run config; writes checkpoint + trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Use an existing dataset file instead of generating one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Solve a reduced margin program and write the report.
    Theory {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum)]
        program: ProgramArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the complexity sweep described by a sweep config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Emit diagnostics for a trained Emb-MLP checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            n,
            complexity,
            identity,
        } => {
            let mut spec: DatasetSpec = match config {
                Some(path) => read_json(&path)?,
                None => DatasetSpec::new(n, complexity, identity, 0),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            cmd_gen(&spec, &out)?;
        }
        Command::Train {
            config,
            out,
            seed,
            dataset,
        } => {
            let mut run_config: RunConfig = read_json(&config)?;
            if let Some(s) = seed {
                run_config.dataset.seed = s;
                match &mut run_config.model {
                    twohop::harness::ModelConfig::EmbMlp { train, .. } => train.seed = s,
                    twohop::harness::ModelConfig::Nanoformer { train, .. } => train.seed = s,
                }
            }
            cmd_train(&run_config, &out, dataset.as_deref())?;
        }
        Command::Theory {
            n,
            program,
            out,
            seed,
        } => {
            let program = match program {
                ProgramArg::Id => Program::Id,
                ProgramArg::Noid => Program::NoId,
            };
            cmd_theory(n, program, &out, seed)?;
        }
        Command::Sweep {
            config,
            out,
            workers,
        } => {
            let mut sweep: SweepConfig = read_json(&config)?;
            if let Some(w) = workers {
                sweep.workers = w;
            }
            cmd_sweep(&sweep, &out)?;
        }
        Command::Analyze {
            checkpoint,
            dataset,
            out,
        } => {
            cmd_analyze(&checkpoint, &dataset, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
