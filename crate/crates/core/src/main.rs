use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use qmlhfl::config::RunConfig;
use qmlhfl::experiment::{self, ExperimentError};

#[derive(Parser)]
#[command(
    name = "qmlhfl",
    version,
    about = "Multi-layer hierarchical federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, summary.json and resolved_config.toml.
    Run {
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the convergence condition, feasible learning rate and bound.
    Theory { config: PathBuf },
    /// Optimize the intra-layer counts under the configured deadline.
    Optimize {
        config: PathBuf,
        /// Also run the exhaustive search.
        #[arg(long)]
        oracle: bool,
    },
    /// Train reduced-depth variants and write depths.csv.
    CompareDepths {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the variance constant of every layer's quantizer.
    MeasureQ { config: PathBuf },
}

fn print_json<T: Serialize>(v: &T) -> Result<(), ExperimentError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    emit(&format!("{s}\n"));
    Ok(())
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<RunConfig, ExperimentError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config, out)?;
            let res = experiment::run_experiment(&cfg)?;
            print_json(&res.summary)
        }
        Command::Theory { config } => {
            let p = experiment::prepare(&load(&config, None)?)?;
            if p.config.schedule.taus.is_empty() {
                return Err(ExperimentError::Config("theory needs schedule.taus".into()));
            }
            print_json(&experiment::theory_report(&p, &p.config.schedule.taus)?)
        }
        Command::Optimize { config, oracle } => {
            let mut cfg = load(&config, None)?;
            cfg.optimizer.oracle |= oracle;
            cfg.schedule.optimize = true;
            let p = experiment::prepare(&cfg)?;
            print_json(&experiment::optimize_report(&p)?)
        }
        Command::CompareDepths { config, out } => {
            let rows = experiment::compare_depths_experiment(&load(&config, out)?)?;
            emit(&experiment::depth_csv(&rows));
            Ok(())
        }
        Command::MeasureQ { config } => {
            print_json(&experiment::measure_q_report(&load(&config, None)?)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
