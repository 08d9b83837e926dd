use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saf_marl::graph::Fault;
use saf_marl::harness::check::{run_checks, CheckOptions};
use saf_marl::harness::plot::plot_runs;
use saf_marl::harness::run::{resolve_out_dir, run_matrix, run_one, MatrixSpec};
use saf_marl::harness::{parse_variants, ExperimentConfig, HarnessError, Variant};

#[derive(Parser)]
#[command(name = "saf-marl", version, about = "Multi-agent PPO with a slot-memory facilitator and a shared policy pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its metrics CSV, checkpoint and run record.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory [default: $SAF_MARL_OUT, then the config's output_dir, then ./runs]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every variant × agent count × seed combination and summarize.
    Matrix {
        /// Base config; desk-scale defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated variants, e.g. `SAF+SP,I` [default: all six]
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated agent counts [default: the config's n_agents]
        #[arg(long, value_delimiter = ',')]
        agents: Vec<usize>,
        /// Number of seeds, numbered from 0 [default: the config's seed list]
        #[arg(long)]
        seeds: Option<u64>,
        /// Set the ghost count to this many ghosts per agent.
        #[arg(long)]
        ghost_scale: Option<usize>,
        /// Maximum concurrent runs (0 = one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot mean return curves of every run under a directory as SVG.
    Plot {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast verification suite.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_softmax_fault: bool,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = resolve_out_dir(out.as_deref(), &cfg);
            let record = run_one(&cfg, seed, &dir)?;
            match record.final_return {
                Some(r) => println!("{} seed {}: final mean return {r:.3} ({})", record.variant, seed, dir.display()),
                None => println!("{} seed {}: no finished episodes ({})", record.variant, seed, dir.display()),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Matrix { config, variants, agents, seeds, ghost_scale, jobs, out } => {
            let cfg = load_config(config.as_ref())?;
            let variants = match variants {
                Some(list) => parse_variants(&list)?,
                None => Variant::ALL.to_vec(),
            };
            if variants.is_empty() {
                return Err(HarnessError::Config("no variants given".into()));
            }
            let agents = if agents.is_empty() { vec![cfg.env.n_agents] } else { agents };
            let seeds = match seeds {
                Some(k) => (0..k).collect(),
                None => cfg.seeds.clone(),
            };
            let spec = MatrixSpec { variants, agents, seeds, ghost_scale, jobs };
            let dir = resolve_out_dir(out.as_deref(), &cfg);
            let outcome = run_matrix(&cfg, &spec, &dir)?;
            for row in &outcome.summary {
                println!("{:<10} N={:<3} runs={:<3} final return {:.3} ± {:.3}", row.variant, row.n_agents, row.runs, row.mean, row.std);
            }
            if let Some((cell, err)) = outcome.failures.into_iter().next() {
                eprintln!("run {} failed", cell.dir_name());
                return Err(err);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { runs, out } => {
            let curves = plot_runs(&runs, &out)?;
            println!("wrote {} curve(s) to {}", curves, out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { seed, inject_softmax_fault } => {
            let opts = CheckOptions { seed, fault: inject_softmax_fault.then_some(Fault::SoftmaxBackwardSign) };
            let mut all = true;
            for c in run_checks(&opts) {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                all &= c.passed;
            }
            Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
