#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::Config;
use crate::error::CliError;
use crate::report::OutDir;

/// Sensitivity of expected-utility maximization to the market price of risk.
#[derive(Debug, Parser)]
#[command(name = "mprsens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config file.
    #[arg(long, global = true, default_value = "mprsens.toml")]
    config: PathBuf,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Monte Carlo seed; overrides `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Multiplies every upper-bound tolerance.
    #[arg(long, global = true, default_value_t = 1.0)]
    tolerance_scale: f64,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Solve the base problem.
    Solve,
    /// Gradients, Hessians and identity residuals.
    Expand,
    /// Corrected strategy and deficit table.
    Strategies,
    /// Full identity and order-fit suite.
    Verify,
    /// Monte Carlo estimates for the constant-coefficient model.
    Mc,
    /// Truncated-moment divergence table.
    Counterexample,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Expand => "expand",
            Command::Strategies => "strategies",
            Command::Verify => "verify",
            Command::Mc => "mc",
            Command::Counterexample => "counterexample",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if !(cli.tolerance_scale > 0.0 && cli.tolerance_scale.is_finite()) {
        return Err(CliError::Config {
            key: "--tolerance-scale".into(),
            message: format!("must be positive, got {}", cli.tolerance_scale),
        });
    }
    if let Some(n) = cli.threads {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (mut cfg, _) = Config::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.dir = Some(dir.clone());
    }
    let dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let out = OutDir::create(&dir)?;

    let mut r = Run::new(&cfg, &out, cli.tolerance_scale);
    let results = match cli.command {
        Command::Solve => r.solve(),
        Command::Expand => r.expand(),
        Command::Strategies => r.strategies(),
        Command::Verify => r.verify(),
        Command::Mc => r.mc(),
        Command::Counterexample => r.counterexample(),
    }?;
    out.report(&cfg, cli.command.name(), cli.tolerance_scale, &r.checks, results)?;

    for c in &r.checks.items {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        let rel = match c.relation {
            report::Relation::AtMost => "<=",
            report::Relation::AtLeast => ">=",
        };
        println!("{mark} {:<32} {:>12.4e} {rel} {:.4e}", c.name, c.value, c.bound);
    }
    println!("report written to {}", dir.join("report.json").display());
    let failed = r.checks.failed();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ToleranceFailure { failed })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
