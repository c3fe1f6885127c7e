use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emix_core::config::RunConfig;
use emix_core::Error;

use emix_cli::{cmd_export_embeddings, cmd_stats_report, cmd_sweep, cmd_train, commands, exit_code, parse_grid};

/// Extended MixStyle experiments on synthetic 3-D cohorts.
#[derive(Parser)]
#[command(name = "emix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the source cohort and evaluate on the targets.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `io.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of a hyper-parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// e.g. `alpha=0.1,0.3;p=0.5,0.9` or `layers;variant`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-cohort skewness and kurtosis of intermediate features.
    StatsReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump pooled embeddings of every sample.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out } => {
            let dir = cmd_train(&load_config(&config)?, out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Sweep { config, grid, out } => {
            let cfg = load_config(&config)?;
            let grid = parse_grid(&grid)?;
            let summary = cmd_sweep(&cfg, &grid, out.as_deref(), commands::sweep_threads()?)?;
            for (cell, e) in &summary.failed {
                eprintln!("cell {cell} failed: {e}");
            }
            println!("{}", summary.dir.join("sweep.csv").display());
            if let Some(e) = summary.worst() {
                return Err(if e.is_numerical() {
                    Error::Numerical {
                        tensor: format!("{} of {} cells failed", summary.failed.len(), summary.cells),
                    }
                } else {
                    Error::Invalid(format!("{} of {} cells failed", summary.failed.len(), summary.cells))
                });
            }
        }
        Command::StatsReport { config, ckpt, out } => {
            let dir = cmd_stats_report(&load_config(&config)?, ckpt.as_deref(), out.as_deref())?;
            println!("{}", dir.join("stats.csv").display());
        }
        Command::ExportEmbeddings { config, ckpt, out } => {
            let dir = cmd_export_embeddings(&load_config(&config)?, &ckpt, out.as_deref())?;
            println!("{}", dir.join("embeddings.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
