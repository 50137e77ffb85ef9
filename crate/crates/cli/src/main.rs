use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nirb_cli::commands::{cmd_serve, cmd_train, cmd_validate, write_report, Failure, SampleSpec};

#[derive(Parser)]
#[command(name = "nirb", version, about = "Nonintrusive certified reduced-basis models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose, validate and run the greedy; writes the model, trace and validation CSVs.
    Train {
        config: PathBuf,
        /// Model file to write (default: `<config stem>.model.json`).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Compares reduced solutions against truth solves and writes a CSV report.
    Validate {
        model: PathBuf,
        /// Number of uniform random samples.
        #[arg(long, conflicts_with = "grid")]
        samples: Option<usize>,
        /// Use the full trial grid instead of random samples.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Also evaluate at the snapshot parameters.
        #[arg(long)]
        include_snapshots: bool,
        /// CSV destination (default: stdout).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Serves the online stage over HTTP.
    Serve {
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        allow_extrapolation: bool,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, out.as_deref()).map(|_| ()),
        Command::Validate {
            model,
            samples,
            grid,
            seed,
            include_snapshots,
            out,
        } => {
            let spec = match (samples, grid) {
                (_, true) => SampleSpec::Grid,
                (Some(k), false) => SampleSpec::Random(k),
                (None, false) => SampleSpec::Default,
            };
            let report = cmd_validate(&model, spec, seed, include_snapshots)?;
            write_report(&report, out.as_deref())
        }
        Command::Serve {
            model,
            bind,
            allow_extrapolation,
        } => cmd_serve(&model, bind, allow_extrapolation),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
