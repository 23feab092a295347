use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use slipctl::cli::{self, ExperimentConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Simulate,
    Optimize,
    Verify,
    Spectrum,
}

/// Boundary control of stochastic Navier-Stokes flow with slip walls.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    command: Command,
    /// JSON experiment file; desk-scale defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn run(args: Args) -> Result<i32, slipctl::Error> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = args.seed {
        cfg.monte_carlo.seed = s;
    }
    if let Some(t) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| slipctl::Error::Config(format!("threads: {e}")))?;
    }
    let out = args
        .out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    match args.command {
        Command::Simulate => {
            let m = cli::cmd_simulate(&cfg, &out)?;
            eprintln!(
                "simulate: {} files in {:.1} s",
                m.outputs.len(),
                m.wall_clock_seconds
            );
        }
        Command::Optimize => {
            let o = cli::cmd_optimize(&cfg, &out)?;
            eprintln!(
                "optimize: {} files in {:.1} s",
                o.manifest.outputs.len(),
                o.manifest.wall_clock_seconds
            );
        }
        Command::Verify => {
            let (rep, _) = cli::cmd_verify(&cfg, &out)?;
            print!("{}", rep.summary());
            if !rep.passed() {
                return Ok(cli::EXIT_VERIFY);
            }
        }
        Command::Spectrum => {
            let m = cli::cmd_spectrum(&cfg, &out)?;
            eprintln!(
                "spectrum: {} files in {:.1} s",
                m.outputs.len(),
                m.wall_clock_seconds
            );
        }
    }
    Ok(cli::EXIT_OK)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(c) => ExitCode::from(c as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
