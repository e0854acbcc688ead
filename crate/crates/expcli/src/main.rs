use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gadkl_expcli::commands;
use gadkl_expcli::config::Overrides;
use gadkl_expcli::CliError;

/// Surrogate-accelerated genetic optimization of field trajectories on a
/// ferroelectric lattice.
#[derive(Parser)]
#[command(name = "gadkl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimizer and write manifest, metrics and archives.
    Run {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Compare acquisition functions on one exhaustively evaluated generation.
    PolicyAcq {
        #[command(flatten)]
        opts: Overrides,
        /// Snapshot CSV from `gadkl snapshot`; generated when omitted.
        #[arg(long, value_name = "FILE")]
        snapshot: Option<PathBuf>,
    },
    /// Compare fitness-estimation policies with a low-capacity surrogate.
    PolicyEst {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Evaluate chromosomes from a CSV file on the simulator.
    Eval {
        #[command(flatten)]
        opts: Overrides,
        /// Rows of 900 genes, or id,lineage followed by 900 genes.
        file: PathBuf,
        /// Simulate without the random-field disorder.
        #[arg(long)]
        zero_disorder: bool,
        /// Write the per-step mean polarization to this CSV.
        #[arg(long, value_name = "FILE")]
        history: Option<PathBuf>,
    },
    /// Exhaustively evaluate the seeded first generation and save it.
    Snapshot {
        #[command(flatten)]
        opts: Overrides,
        /// Output file; defaults to snapshot.csv in the output directory.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { opts } => {
            commands::cmd_run(&opts.resolve()?)?;
        }
        Command::PolicyAcq { opts, snapshot } => {
            let config = opts.resolve()?;
            let dir = config.resolved_output_dir();
            let snap = match snapshot {
                Some(path) => commands::load_snapshot(&path)?,
                None => {
                    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
                    commands::cmd_snapshot(&config, Some(&dir.join("snapshot.csv")))?.0
                }
            };
            commands::cmd_policy_study_acquisition(&config, &snap, &dir)?;
        }
        Command::PolicyEst { opts } => {
            let config = opts.resolve()?;
            commands::cmd_policy_study_estimation(&config, &config.resolved_output_dir())?;
        }
        Command::Eval {
            opts,
            file,
            zero_disorder,
            history,
        } => {
            commands::cmd_eval(&opts.resolve()?, &file, zero_disorder, history.as_deref())?;
        }
        Command::Snapshot { opts, out } => {
            commands::cmd_snapshot(&opts.resolve()?, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gadkl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
