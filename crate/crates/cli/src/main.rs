use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use simcl_cli::{report, run_experiment, CliError, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "simcl", version, about = "Contrastive pretraining experiments on small image sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment a config describes.
    Run {
        config: PathBuf,
        /// Run only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; overrides the config and SIMCL_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Aggregate the runs under a directory into report CSVs.
    Report { dir: PathBuf },
    /// Parse and validate a config, then print its normalized form.
    Validate { config: PathBuf },
    /// Regenerate the augmentation golden files.
    Golden {
        /// Required: overwrites the stored corpus.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "crates/core/tests/golden")]
        dir: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::from_file(path).map_err(|e| CliError::config(path, e))
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out, threads, quiet } => {
            let cfg = load(&config)?;
            if threads == 0 {
                return Err(CliError::Usage("--threads must be at least 1".into()));
            }
            let dir = run_experiment(&cfg, &RunOptions { out, seed, threads, quiet })?;
            println!("{}", dir.display());
        }
        Command::Report { dir } => {
            let bundle = report(&dir)?;
            print!("{}", bundle.table());
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("# fingerprint {}", cfg.fingerprint());
            print!("{}", cfg.to_toml());
        }
        Command::Golden { force, dir } => {
            if !force {
                return Err(CliError::Usage("refusing to overwrite golden files without --force".into()));
            }
            let n = simcl_core::augment::golden::write_corpus(&dir, true)?;
            println!("wrote {n} cases to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
