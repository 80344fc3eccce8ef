use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rootsa_cli::commands::{cmd_audit, cmd_estimate, cmd_run, cmd_sweep};
use rootsa_cli::CmdOptions;

/// Experiment harness for variance-reduced stochastic approximation on
/// tabular fixed-point problems.
#[derive(Parser)]
#[command(name = "rootsa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run per (seed, horizon) pair and write records.csv.
    Run(CommonArgs),
    /// Run a seed x horizon grid and fit the log-log error slope.
    Sweep(CommonArgs),
    /// Certify kernel stochasticity, contraction factors, and mixing.
    Audit(CommonArgs),
    /// Estimate instance-dependent error functionals and predicted rates.
    Estimate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the run grid; output is identical for any count.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Added to every seed in the config.
    #[arg(long = "seed-offset", default_value_t = 0)]
    seed_offset: u64,
    /// Replay injected series through the reporting path, skipping the
    /// solver.
    #[arg(long = "dry-run", default_value_t = false)]
    dry_run: bool,
}

impl CommonArgs {
    fn options(&self) -> CmdOptions {
        CmdOptions {
            config: self.config.clone(),
            out: self.out.clone(),
            workers: self.workers,
            seed_offset: self.seed_offset,
            dry_run: self.dry_run,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(&args.options()),
        Command::Sweep(args) => cmd_sweep(&args.options()),
        Command::Audit(args) => cmd_audit(&args.options()),
        Command::Estimate(args) => cmd_estimate(&args.options()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
