//! `memlab`: attention memory benchmarks, gradient checks and the sequence-length planner.
//!
//! Exit codes: 0 success, 1 configuration or validation error (no report),
//! 2 a correctness check failed (report written, failures on stderr).

mod commands;
mod config;
mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Outcome;
use config::RunConfig;
use report::OutputFormat;

#[derive(Debug, Parser)]
#[command(
    name = "memlab",
    version,
    about = "Attention memory benchmarks and long-sequence memory planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv", global = true)]
    format: OutputFormat,
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    /// Run independent rows concurrently.
    #[arg(long, global = true)]
    parallel: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Naive vs tiled peak memory and output agreement.
    AttnBench,
    /// Finite-difference checks of both backward passes.
    Gradcheck,
    /// Bias-gradient accumulation error by policy.
    PrecisionDemo,
    /// Largest fitting sequence length per device count and framework profile.
    PlanMaxSeq,
    /// Per-device memory terms at the configured sequence lengths.
    PlanBreakdown,
    /// attn-bench over a grid of lengths and tile sizes.
    Sweep,
}

fn run(cli: &Cli, cfg: &RunConfig) -> memlab::Result<Outcome> {
    match cli.command {
        Command::AttnBench => commands::attn_bench(cfg, cli.seed, cli.parallel),
        Command::Gradcheck => commands::gradcheck(cfg, cli.seed, cli.parallel),
        Command::PrecisionDemo => commands::precision_demo(cfg, cli.seed, cli.parallel),
        Command::PlanMaxSeq => commands::plan_max_seq(cfg, cli.parallel),
        Command::PlanBreakdown => commands::plan_breakdown(cfg),
        Command::Sweep => commands::sweep(cfg, cli.seed, cli.parallel),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cfg = match RunConfig::load(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let outcome = match run(&cli, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                memlab::Error::Invariant(_) | memlab::Error::Integrity(_) => 2,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };
    let written = match &cli.out {
        Some(path) => {
            std::fs::File::create(path).and_then(|f| outcome.table.write(cli.format, std::io::BufWriter::new(f)))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            outcome.table.write(cli.format, &mut lock).and_then(|_| lock.flush())
        }
    };
    if let Err(e) = written {
        eprintln!("error: cannot write report: {e}");
        return ExitCode::from(1);
    }
    if !outcome.failures.is_empty() {
        for f in &outcome.failures {
            eprintln!("check failed: {f}");
        }
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
