use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lbbsp_cli::{
    cmd_compare, cmd_predict_bench, cmd_run, format_sizes, parse_gpu_profile, solve_cpu, solve_gpu, COMPARISON_FILE,
    PREDICT_BENCH_FILE,
};
use lbbsp_core::sizer::GpuProfile;

#[derive(Parser)]
#[command(name = "lbbsp", version, about = "Straggler-aware distributed SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Directory for result files (created if missing).
    #[arg(long, default_value = "lbbsp-out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; writes records.csv and metrics.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Run several scenarios; writes comparison.csv.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Compare speed predictors on the benchmark trace; writes predict_bench.csv.
    PredictBench {
        /// Scenario with a `benchmark` section; a desk-scale default is used if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Print a batch-size assignment.
    #[command(subcommand)]
    Solve(Solve),
}

#[derive(Subcommand)]
enum Solve {
    Cpu {
        #[arg(long, value_delimiter = ',', required = true)]
        speeds: Vec<f64>,
        #[arg(long)]
        budget: u64,
        /// Exhaustive search instead of the closed form (n <= 4, budget <= 200).
        #[arg(long)]
        oracle: bool,
    },
    Gpu {
        /// Comma-separated `m:b:x_s:x_o` profiles.
        #[arg(long, value_delimiter = ',', required = true, value_parser = profile)]
        profiles: Vec<GpuProfile>,
        /// Predicted communication seconds per worker (default 0).
        #[arg(long, value_delimiter = ',')]
        comm: Vec<f64>,
        #[arg(long)]
        budget: u64,
        #[arg(long)]
        oracle: bool,
    },
}

fn profile(s: &str) -> std::result::Result<GpuProfile, String> {
    parse_gpu_profile(s).map_err(|e| format!("{e:#}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output } => {
            let m = cmd_run(&config, &output.out, output.seed)?;
            let conv = m
                .updates_to_convergence
                .map_or("not converged".to_string(), |u| format!("converged after {u} updates"));
            println!(
                "{} updates, {conv}, mean per-update time {:.6} s, wastage {:.4}",
                m.updates, m.mean_per_update_time, m.wastage
            );
        }
        Command::Compare { configs, output } => {
            let rows = cmd_compare(&configs, &output.out, output.seed)?;
            println!(
                "{} scenarios -> {}",
                rows.len(),
                output.out.join(COMPARISON_FILE).display()
            );
        }
        Command::PredictBench { config, output } => {
            let rows = cmd_predict_bench(config.as_deref(), &output.out, output.seed)?;
            for r in &rows {
                println!(
                    "{:?}: rmse {:.4}, per-update {:.6} s",
                    r.predictor, r.rmse, r.mean_per_update_time
                );
            }
            println!("-> {}", output.out.join(PREDICT_BENCH_FILE).display());
        }
        Command::Solve(Solve::Cpu { speeds, budget, oracle }) => {
            println!("{}", format_sizes(&solve_cpu(&speeds, budget, oracle)?));
        }
        Command::Solve(Solve::Gpu {
            profiles,
            comm,
            budget,
            oracle,
        }) => {
            println!("{}", format_sizes(&solve_gpu(&profiles, &comm, budget, oracle)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LBBSP_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
