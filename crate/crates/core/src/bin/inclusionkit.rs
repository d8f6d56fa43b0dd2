use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use inclusionkit::experiment::runner::{self, RunError, EXIT_USAGE};
use inclusionkit::experiment::{load_config, preset, trace, ExperimentConfig};

#[derive(Parser)]
#[command(name = "inclusionkit", version, about = "Resolvent solvers for split variational inclusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the problem described by a TOML config.
    Run {
        config: PathBuf,
        /// Trace CSV path (overrides outputs.trace).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Summary JSON path (overrides outputs.summary); printed to stdout when unset.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run a shipped preset, or write its config with --emit-config.
    Preset {
        /// dynamic-svi, stochastic-svi, or coupled-svi
        name: String,
        #[arg(long)]
        emit_config: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Print bound predictions without solving.
    Bounds { config: PathBuf },
    /// Monte Carlo mean squared error curve for a stochastic config.
    Mc {
        config: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
        /// CSV output path; stdout when unset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), RunError> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
            Err(RunError::Io { path: "<stdout>".into(), message: e.to_string() })
        }
        _ => Ok(()),
    }
}

fn run_config(mut cfg: ExperimentConfig, trace: Option<PathBuf>, summary: Option<PathBuf>) -> Result<u8, RunError> {
    if trace.is_some() {
        cfg.outputs.trace = trace;
    }
    if summary.is_some() {
        cfg.outputs.summary = summary;
    }
    let outcome = runner::run(&cfg)?;
    for w in &outcome.summary.warnings {
        eprintln!("warning: {w}");
    }
    if cfg.outputs.summary.is_none() {
        emit(&runner::summary_json(&outcome.summary))?;
    }
    eprintln!("{:?} after {} iterations", outcome.summary.verdict, outcome.summary.iterations);
    Ok(outcome.exit_code as u8)
}

fn execute(cmd: Command) -> Result<u8, RunError> {
    match cmd {
        Command::Run { config, trace, summary } => run_config(load_config(&config)?, trace, summary),
        Command::Preset { name, emit_config, trace, summary } => {
            let cfg = preset(&name).map_err(|e| RunError::Usage(e.to_string()))?;
            if let Some(path) = emit_config {
                let text = inclusionkit::experiment::presets::preset_source(&name).expect("validated above");
                fs::write(&path, text).map_err(|e| RunError::Io { path: path.clone(), message: e.to_string() })?;
                return Ok(0);
            }
            run_config(cfg, trace, summary)
        }
        Command::Bounds { config } => {
            let b = runner::bounds(&load_config(&config)?)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&b).expect("bounds serialize")))?;
            Ok(0)
        }
        Command::Mc { config, seeds, out } => {
            let curve = runner::monte_carlo(&load_config(&config)?, seeds)?;
            match out {
                Some(path) => {
                    let f = fs::File::create(&path)
                        .map_err(|e| RunError::Io { path: path.clone(), message: e.to_string() })?;
                    trace::write_mc_csv(&curve, io::BufWriter::new(f))
                        .map_err(|e| RunError::Io { path, message: e.to_string() })?;
                }
                None => {
                    let mut buf = Vec::new();
                    trace::write_mc_csv(&curve, &mut buf).expect("writing to memory");
                    emit(&String::from_utf8(buf).expect("CSV is ASCII"))?;
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
