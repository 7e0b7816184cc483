//! Command-line front end: single runs and the two sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fdmimo::scenario::{self, Overrides, ScenarioError};

#[derive(Parser)]
#[command(
    name = "fdmimo",
    version,
    about = "Full-duplex massive-MIMO link-level simulator"
)]
struct Cli {
    /// Override the channel seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the literal published formulas instead of the corrected ones.
    #[arg(long, global = true)]
    strict_paper: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one scenario; writes <out>.json and <out>.csv.
    Run {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Rank every (n_up, n_down) partition; writes a CSV table.
    SweepPartition {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Best partition per element spacing (in wavelengths); writes a CSV.
    SweepSpacing {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        spacings: Vec<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<String, ScenarioError> {
    let overrides = Overrides {
        seed: cli.seed,
        strict_paper: cli.strict_paper,
    };
    match cli.command {
        Command::Run { config, output } => {
            let r = scenario::run(&config, &output, &overrides)?;
            Ok(format!(
                "n_up={} n_down={} precoded sum capacity {:.4} bit/s/Hz",
                r.link.n_up,
                r.link.n_down,
                r.link.precoded.sum_capacity()
            ))
        }
        Command::SweepPartition { config, output } => {
            let t = scenario::sweep_partition(&config, &output, &overrides)?;
            Ok(format!("{} rows\n{}", t.rows.len(), t.verdict_line()))
        }
        Command::SweepSpacing {
            config,
            spacings,
            output,
        } => {
            let s = scenario::sweep_spacing(&config, &spacings, &output, &overrides)?;
            Ok(format!("{} rows\n{}", s.rows.len(), s.verdict_line()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
