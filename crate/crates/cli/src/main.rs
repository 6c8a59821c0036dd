use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use viable_core::checkpoint::Checkpoint;
use viable_core::config::{parse_config_with, ExperimentConfig, Overrides, Profile};
use viable_core::{gradcheck, report, runner, Error, Result};

/// Meta-learning experiments with learned inner-loop losses.
#[derive(Parser)]
#[command(name = "viable", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every cell of an experiment config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        profile: Option<Profile>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Finite-difference checks of the autodiff primitives and of every
    /// method's outer gradient.
    Gradcheck,
    /// Evaluate a checkpoint under a config's protocol; CSV on stdout.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Render a results CSV as an SVG line chart.
    Plot { csv: PathBuf, svg: PathBuf },
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    parse_config_with(&text, overrides)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            profile,
            workers,
        } => {
            let overrides = Overrides {
                seed,
                output: out,
                profile,
                workers,
            };
            let config = load_config(&config, &overrides)?;
            let outcome = runner::run(&config)?;
            if outcome.checks.is_empty() {
                println!("{} rows written to {}", outcome.rows.len(), config.output.join(runner::RESULTS_FILE).display());
            } else {
                print!("{}", runner::gradcheck_report(&outcome.checks));
            }
            Ok(())
        }
        Command::Gradcheck => {
            let checks = gradcheck::run_all()?;
            print!("{}", runner::gradcheck_report(&checks));
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(Error::Invariant(format!("{failed} finite-difference checks failed")));
            }
            println!("all {} checks passed", checks.len());
            Ok(())
        }
        Command::Eval { checkpoint, config } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = load_config(&config, &Overrides::default())?;
            let rows = runner::evaluate_checkpoint(&ckpt, &config)?;
            print!("{}", report::csv_string(&rows)?);
            Ok(())
        }
        Command::Plot { csv, svg } => report::emit_svg(&report::read_csv(&csv)?, &svg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
