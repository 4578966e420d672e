use std::path::PathBuf;
use std::process::ExitCode;

use affine_lab_cli::{parse_config, run, Command};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "affine-lab",
    version,
    about = "Affine and catalytic CBI process experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for path simulation (falls back to AFFINE_LAB_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Solve the Riccati system for each configured frequency.
    Transform,
    /// Write simulated paths.
    Simulate,
    /// Run the configured consistency checks.
    Validate,
    /// Run the fluctuation-limit experiment.
    Limit,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = cli.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    let workers = cli.workers.or_else(|| {
        std::env::var("AFFINE_LAB_WORKERS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
    });
    let out = cli
        .out
        .unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    let command = match cli.command {
        Cmd::Transform => Command::Transform,
        Cmd::Simulate => Command::Simulate,
        Cmd::Validate => Command::Validate,
        Cmd::Limit => Command::Limit,
    };
    match run(command, &cfg, &out, workers, &mut std::io::stdout()) {
        Ok(outcome) => match outcome.first_failure() {
            None => {
                println!(
                    "{}: {} file(s) in {}",
                    command.name(),
                    outcome.files.len(),
                    out.display()
                );
                ExitCode::SUCCESS
            }
            Some(row) => {
                eprintln!("FAIL {row}");
                ExitCode::from(1)
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
