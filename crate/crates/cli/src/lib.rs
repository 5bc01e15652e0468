//! Command-line front end for the `syncfed` binary.
//!
//! ```text
//! syncfed run --config F [--strategy syncfed|fedavg|both] [--output DIR]
//!             [--transcript FILE] [--transport sim|socket] [--listen ADDR]
//! syncfed compare --config F [--seeds K] [--output DIR]
//! syncfed sync-report --config F
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
//! Diagnostics go to stderr; result tables go to stdout.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use syncfed_core::harness::config::load_config;
use syncfed_core::harness::{
    emit_csv, emit_plotdata, render_sync_report, run_compare, run_compare_seeds, run_single,
    seeds_csv, summary_csv, ComparisonSummary, HarnessError, RunSettings,
};
use syncfed_core::orchestrator::run_experiment_socket;
use syncfed_core::{
    ConfigError, ExperimentConfig, ExperimentError, RunOptions, Strategy, StrategyChoice,
};

#[derive(Debug, Parser)]
#[command(
    name = "syncfed",
    about = "Freshness-weighted federated learning experiments"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Syncfed,
    Fedavg,
    Both,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum TransportArg {
    #[default]
    Sim,
    Socket,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment (or both strategies when the config says so).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's strategy.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write every delivered frame to this file.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sim")]
        transport: TransportArg,
        /// Socket transport bind address.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// Paired SyncFed/FedAvg runs over seeds `seed, seed+1, ...`.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u32,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Clock-sync status of every client against the server.
    SyncReport {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c.to_string()),
            HarnessError::Experiment(ExperimentError::Setting { .. }) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        HarnessError::from(e).into()
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    load_config(path).map_err(|e: ConfigError| Failure::Config(e.to_string()))
}

fn strategies(choice: StrategyChoice) -> Vec<Strategy> {
    match choice {
        StrategyChoice::Syncfed => vec![Strategy::Syncfed],
        StrategyChoice::Fedavg => vec![Strategy::Fedavg],
        StrategyChoice::Both => Strategy::ALL.to_vec(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn run_socket(
    cfg: &ExperimentConfig,
    out: &Path,
    listen: &str,
    transcript: Option<&Path>,
) -> Result<(), Failure> {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let options = RunOptions {
        transcript: transcript.is_some(),
    };
    let mut runs = Vec::new();
    for strategy in strategies(cfg.strategy) {
        let run = run_experiment_socket(cfg, strategy, listen, &options)?;
        emit_csv(&run.records, &out.join(format!("{strategy}.csv")))?;
        if let (Some(path), Some(bytes)) = (transcript, &run.transcript) {
            let path = if runs.is_empty() {
                path.to_path_buf()
            } else {
                path.with_extension(format!("{strategy}.bin"))
            };
            std::fs::write(&path, bytes)
                .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        }
        runs.push(run);
    }
    let refs: Vec<_> = runs.iter().collect();
    let summary = ComparisonSummary::from_runs(cfg.seed, &refs, cfg.accuracy_threshold);
    emit_plotdata(&summary, out)?;
    write_file(&out.join("config.json"), &cfg.to_json())?;
    print!("{}", summary_csv(&summary));
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            strategy,
            output,
            transcript,
            transport,
            listen,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = strategy {
                cfg.strategy = match s {
                    StrategyArg::Syncfed => StrategyChoice::Syncfed,
                    StrategyArg::Fedavg => StrategyChoice::Fedavg,
                    StrategyArg::Both => StrategyChoice::Both,
                };
            }
            let out = output.unwrap_or_else(|| cfg.output_dir.clone());
            if let TransportArg::Socket = transport {
                return run_socket(&cfg, &out, &listen, transcript.as_deref());
            }
            match cfg.strategy {
                StrategyChoice::Both => {
                    if transcript.is_some() {
                        log::warn!("--transcript applies to single-strategy runs; ignored");
                    }
                    let summary = run_compare(&cfg, &out)?;
                    print!("{}", summary_csv(&summary));
                }
                choice => {
                    let strategy = strategies(choice)[0];
                    let settings = RunSettings {
                        options: RunOptions::default(),
                        transcript_path: transcript,
                    };
                    let run = run_single(&cfg, strategy, &out, &settings)?;
                    let summary =
                        ComparisonSummary::from_runs(cfg.seed, &[&run], cfg.accuracy_threshold);
                    print!("{}", summary_csv(&summary));
                }
            }
            log::info!("results in {}", out.display());
            Ok(())
        }
        Command::Compare {
            config,
            seeds,
            output,
        } => {
            let cfg = load(&config)?;
            if seeds == 0 {
                return Err(Failure::Config("--seeds must be at least 1".into()));
            }
            let out = output.unwrap_or_else(|| cfg.output_dir.clone());
            let summaries = run_compare_seeds(&cfg, seeds, &out)?;
            print!("{}", seeds_csv(&summaries));
            Ok(())
        }
        Command::SyncReport { config } => {
            let cfg = load(&config)?;
            let rows = syncfed_core::harness::sync_report(&cfg)?;
            print!("{}", render_sync_report(&cfg.server.name, &rows));
            Ok(())
        }
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = e.print();
            } else {
                eprint!("{}", e.render());
            }
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
