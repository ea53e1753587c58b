use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use roundsim::config;
use roundsim::experiment::{self, OutputFormat, Sweep};

#[derive(Parser)]
#[command(name = "sim", version, about = "Round-based distributed algorithm simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its log.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Overrides workerCount.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a parameter sweep and write its metric table.
    Sweep {
        sweep: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Run sweep points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Time a configuration under several worker counts.
    Bench {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        threads: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, format, threads } => {
            let mut cfg = config::load_file(&config)?;
            if let Some(t) = threads {
                if t == 0 {
                    bail!("--threads must be at least 1");
                }
                cfg = cfg.with_workers(t);
            }
            let doc = roundsim::run(&cfg).with_context(|| format!("running {}", config.display()))?;
            let text = match format {
                Format::Json => {
                    let mut s = doc.serialize();
                    s.push('\n');
                    s
                }
                Format::Csv => experiment::log_to_csv(&doc),
            };
            experiment::write_output(&text, out.as_deref())?;
        }
        Command::Sweep { sweep, out, format, parallel } => {
            let s = Sweep::load_file(&sweep)?;
            let table = experiment::run_sweep(&s, parallel).with_context(|| format!("sweep {}", sweep.display()))?;
            experiment::emit(&table, format.into(), out.as_deref())?;
        }
        Command::Bench { config, threads, out } => {
            if threads.is_empty() || threads.contains(&0) {
                bail!("--threads needs a list of positive worker counts");
            }
            let cfg = config::load_file(&config)?;
            let rows = experiment::benchmark_threads(&cfg, &threads)?;
            experiment::write_output(&experiment::bench_to_text(&rows), out.as_deref())?;
        }
    }
    Ok(())
}
