mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Run, TableKind};
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "switchdetect", version, about = "Detect which workflow modules changed behavior")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the workflow and write data tables.
    Simulate {
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["t0", "t1", "t0-doe", "t1-codoe"])]
        tables: Vec<TableKind>,
    },
    /// Write the design and its per-step schedule.
    Doe,
    /// Identify linear reference dynamics.
    Dmdc,
    /// Rank module combinations by sparse corrective dynamics.
    Mixed,
    /// Two-simulation regression detection.
    Nodyn,
    /// One-at-a-time and whole-simulation DoE baselines.
    Baseline,
    /// Render the artifacts of a run directory.
    Report {
        /// Run directory; defaults to --out.
        dir: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));

    let (name, action): (&str, Box<dyn FnOnce(&mut Run) -> Result<(), CliError>>) = match cli.command {
        Command::Report { dir } => return commands::cmd_report(&dir.unwrap_or(out)),
        Command::Simulate { tables } => ("simulate", Box::new(move |r| commands::cmd_simulate(r, &tables))),
        Command::Doe => ("doe", Box::new(commands::cmd_doe)),
        Command::Dmdc => ("dmdc", Box::new(commands::cmd_dmdc)),
        Command::Mixed => ("mixed", Box::new(commands::cmd_mixed)),
        Command::Nodyn => ("nodyn", Box::new(commands::cmd_nodyn)),
        Command::Baseline => ("baseline", Box::new(commands::cmd_baseline)),
    };
    let mut run = Run::new(name, config, out)?;
    let result = action(&mut run);
    run.finish(result)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
