use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use isopo_harness::compare::compare;
use isopo_harness::plot::plot_dir;
use isopo_harness::verify::{gradcheck, oracle_check, print_report};
use isopo_harness::{train, RunConfig};

#[derive(Parser)]
#[command(name = "isopo", about = "ISOPO desk-scale experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seeded run and write its CSV and final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every config over several seeds in parallel and aggregate.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference and equivalence suites.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Approximations against brute-force Fisher oracles.
    OracleCheck,
    /// SVG charts from run CSVs found under a directory.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let result = train(&cfg, &cfg.out_dir)?;
            if let Some(a) = result.aborted {
                bail!("run aborted at step {}: {}", a.step, a.reason);
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Compare { configs, seeds, out } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let cfgs = configs.iter().map(load).collect::<Result<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| cfgs[0].out_dir.clone());
            let summary = compare(&cfgs, seeds, &out)?;
            println!(
                "{} runs ({} aborted); summary in {}",
                summary.runs.len(),
                summary.runs.iter().filter(|r| r.aborted.is_some()).count(),
                out.display()
            );
        }
        Command::Gradcheck { config } => {
            let cfg = config.as_ref().map(load).transpose()?;
            let report = gradcheck(cfg.as_ref());
            print_report(&report);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::OracleCheck => {
            let report = oracle_check();
            print_report(&report);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { input, out } => {
            let written = plot_dir(&input, &out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
