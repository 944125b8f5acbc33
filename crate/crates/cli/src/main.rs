//! `breathlink`: operator entry point for simulation, relay hosting,
//! recorded-data ingestion, envelope dumps and synchrony analysis.
//! Every subcommand produces files; nothing is interactive.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 runtime/data error.

mod commands;
mod config;
mod traces;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration (exit 2).
    Config(String),
    /// Failure while processing otherwise valid inputs (exit 3).
    Runtime(String),
}

impl CliError {
    fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }

    fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }
}

#[derive(Parser)]
#[command(name = "breathlink", version, about = "Breath-sharing belt toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed-loop leader/follower simulation and write traces,
    /// the relay log, and a synchrony report.
    Simulate {
        /// Scenario TOML; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Override the scenario duration.
        #[arg(long)]
        duration_ms: Option<u64>,
        /// Override the vibration pattern (coupled/inversed/discrete).
        #[arg(long)]
        pattern: Option<String>,
        /// Override the RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the leader's natural breath period.
        #[arg(long)]
        leader_period_ms: Option<f64>,
        /// Override the follower's natural breath period.
        #[arg(long)]
        follower_period_ms: Option<f64>,
        /// Override the follower's coupling gain (rad/s).
        #[arg(long)]
        coupling_gain: Option<f64>,
    },
    /// Host the relay service until interrupted.
    Relay {
        #[arg(long, default_value = "127.0.0.1:7431")]
        listen: String,
        /// Directory receiving per-session binary logs.
        #[arg(long, default_value = ".")]
        log_dir: PathBuf,
    },
    /// Run the sensing pipeline over a recorded dual-IMU CSV.
    Ingest {
        /// Input CSV with header `t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Treat signal maxima (not minima) as inspiration onsets.
        #[arg(long)]
        max_is_inspiration: bool,
    },
    /// Dump one inspiration+expiration envelope cycle as CSV.
    Envelope {
        /// coupled, inversed or discrete.
        #[arg(long)]
        pattern: String,
        /// Phase duration T in milliseconds.
        #[arg(long)]
        t_ms: f64,
        /// Breath depth in [0,1].
        #[arg(long, default_value_t = 1.0)]
        depth: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate two trace CSVs and report lag, Pearson r and the
    /// longest synchronized section.
    Analyze {
        #[arg(long)]
        trace_a: PathBuf,
        #[arg(long)]
        trace_b: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Use the raw column of three-column traces instead of the
        /// filtered one.
        #[arg(long)]
        raw: bool,
        /// Report the correlation without shifting out the estimated lag.
        #[arg(long)]
        no_lag_compensation: bool,
        /// Ignore samples before this time (settling transient).
        #[arg(long, default_value_t = 0)]
        start_ms: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            out_dir,
            duration_ms,
            pattern,
            seed,
            leader_period_ms,
            follower_period_ms,
            coupling_gain,
        } => commands::simulate(commands::SimulateArgs {
            config,
            out_dir,
            duration_ms,
            pattern,
            seed,
            leader_period_ms,
            follower_period_ms,
            coupling_gain,
        }),
        Command::Relay { listen, log_dir } => commands::relay(&listen, &log_dir),
        Command::Ingest {
            input,
            out_dir,
            max_is_inspiration,
        } => commands::ingest(&input, &out_dir, !max_is_inspiration),
        Command::Envelope {
            pattern,
            t_ms,
            depth,
            out,
        } => commands::envelope(&pattern, t_ms, depth, &out),
        Command::Analyze {
            trace_a,
            trace_b,
            out_dir,
            raw,
            no_lag_compensation,
            start_ms,
        } => commands::analyze(commands::AnalyzeArgs {
            trace_a,
            trace_b,
            out_dir,
            raw,
            lag_compensate: !no_lag_compensation,
            start_ms,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
