use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradphi_cli::output::Status;
use gradphi_cli::{init_workers, resume, run, ExperimentConfig, RunOptions};

/// Experiments on gradient interface models over the periodic lattice.
#[derive(Parser)]
#[command(name = "gradphi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Write outputs here instead of the config's output_dir.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Stop every chain after this many retained samples and leave
        /// checkpoints (0 stops right after burn-in).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue an interrupted or extended run.
    Resume {
        dir: PathBuf,
        /// New per-chain sample budget.
        #[arg(long)]
        samples_per_chain: Option<usize>,
    },
    /// Check a config without running anything.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_workers() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Run {
            config,
            output,
            stop_after,
        } => run(
            &config,
            &RunOptions {
                stop_after,
                output_dir: output,
            },
        ),
        Command::Resume {
            dir,
            samples_per_chain,
        } => resume(&dir, samples_per_chain),
        Command::Validate { config } => {
            let checked = ExperimentConfig::load(&config).and_then(|c| {
                let base = config.parent().unwrap_or(std::path::Path::new("."));
                c.validate(base)?;
                Ok(c)
            });
            return match checked {
                Ok(c) => {
                    println!("ok: {} (config hash {})", c.experiment.name(), c.hash());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            };
        }
    };
    match result {
        Ok(s) => {
            for e in &s.estimates {
                let l = e.l.map(|l| format!(" L={l}")).unwrap_or_default();
                println!("{}{l}: {:.6e} ± {:.2e}", e.name, e.estimate, e.stderr);
            }
            for c in &s.checks {
                let verdict = if c.pass { "pass" } else { "FAIL" };
                println!(
                    "[{verdict}] {}: {:.4e} (tolerance {:e})",
                    c.name, c.value, c.tolerance
                );
            }
            for e in &s.errors {
                eprintln!("error: {e}");
            }
            if s.status == Status::Partial {
                eprintln!("partial run: resume to complete it");
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
