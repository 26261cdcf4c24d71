use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ivforge::app::{self, Command, RunArgs};
use ivforge::montecarlo::Format;

/// Linear IV estimation with covariate-built instruments.
#[derive(Parser)]
#[command(name = "ivforge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw one dataset from a DGP and write it as CSV.
    Simulate(Flags),
    /// Sweep the outcome interaction coefficient (csv + svg).
    Sweep(Flags),
    /// Calibrate and estimate the semi-synthetic models.
    Semisynth(Flags),
    /// Estimate a user CSV under each control transform.
    Audit(Flags),
    /// Solve for the coefficient that normalizes the average partial effect.
    Calibrate(Flags),
    /// Weak-causality diagnostics.
    Diagnose(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

#[derive(clap::Args)]
struct Flags {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra output format where a command supports several.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Worker threads (falls back to IVFORGE_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { app::EXIT_CONFIG } else { app::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let (command, flags) = match cli.command {
        Cmd::Simulate(f) => (Command::Simulate, f),
        Cmd::Sweep(f) => (Command::Sweep, f),
        Cmd::Semisynth(f) => (Command::Semisynth, f),
        Cmd::Audit(f) => (Command::Audit, f),
        Cmd::Calibrate(f) => (Command::Calibrate, f),
        Cmd::Diagnose(f) => (Command::Diagnose, f),
    };
    let args = RunArgs {
        command,
        config: flags.config,
        out: flags.out,
        format: flags.format.map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
            FormatArg::Svg => Format::Svg,
        }),
        threads: flags.threads,
        seed: flags.seed,
    };
    match app::run(&args) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ivforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
