//! Experiment driver for the UM-pFSSL simulator.
//!
//! Subcommands: `partition` (write the partition summary), `run` (execute
//! the configured method and write all reports), `sweep` (grid over alpha,
//! F, nu, or tau), and `report` (summarize a finished output directory).
//!
//! Exit status is 0 only when every module invariant held through the run.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use umpfssl_core::config::{parse_config, ExperimentConfig};
use umpfssl_core::experiment::{
    partition_only, repeat_seed, run_experiment, run_repeats, run_sweep, SweepAxis,
};

#[derive(Parser)]
#[command(
    name = "umpfssl",
    version,
    about = "Personalized federated semi-supervised learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir or ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured method
    /// (um_pfssl, fedavg_semi, local_only, random_helper).
    #[arg(long)]
    method: Option<String>,
    /// Override the ablation mode (en, ta, en+ta).
    #[arg(long)]
    ablation: Option<String>,
    /// Override the repeat count.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the Non-IID partition and write partition.csv.
    Partition(CommonArgs),
    /// Run the configured method and write metrics/costs/partition/summary
    /// reports.
    Run(CommonArgs),
    /// Run a hyperparameter sweep over one axis.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep axis: alpha, f, nu, or tau.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Print a plain-text summary of a finished output directory.
    Report {
        /// Directory previously written by `run` or `sweep`.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = parse_config(&args.config)
        .with_context(|| format!("cannot load {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(method) = &args.method {
        config.method = method.clone();
    }
    if let Some(ablation) = &args.ablation {
        config.ablation = ablation.clone();
    }
    if let Some(repeats) = args.repeats {
        config.repeats = repeats;
    }
    config.validate()?;
    Ok(config)
}

fn output_dir(args: &CommonArgs, config: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_partition(args: &CommonArgs) -> Result<()> {
    let config = load_config(args)?;
    let out = output_dir(args, &config);
    let text = partition_only(&config, &out)?;
    print!("{text}");
    println!("wrote {}", out.join("partition.csv").display());
    Ok(())
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let config = load_config(args)?;
    let out = output_dir(args, &config);
    if config.repeats == 1 {
        let outcome = run_experiment(&config, repeat_seed(config.master_seed, 0), &out)?;
        print!("{}", outcome.summary_text);
        println!("reports written to {}", out.display());
        if !outcome.invariants_ok() {
            bail!("invariant violation: measured traffic exceeds the analytic bound");
        }
    } else {
        let outcome = run_repeats(&config, &out)?;
        for (repeat, run) in outcome.per_repeat.iter().enumerate() {
            println!("--- repeat {repeat} ---");
            print!("{}", run.summary_text);
        }
        println!(
            "mean best test accuracy over {} repeats: {:.4}",
            outcome.per_repeat.len(),
            outcome.mean_best_test_acc
        );
        println!("reports written to {}", out.display());
        if outcome.per_repeat.iter().any(|r| !r.invariants_ok()) {
            bail!("invariant violation in at least one repeat");
        }
    }
    Ok(())
}

fn cmd_sweep(args: &CommonArgs, axis: &str, values: &[f64]) -> Result<()> {
    let config = load_config(args)?;
    let axis = SweepAxis::parse(axis)?;
    let out = output_dir(args, &config);
    let points = run_sweep(&config, axis, values, &out)?;
    println!(
        "{:>10} {:>20} {:>14}",
        axis.name(),
        "best_test_acc",
        "cost_percent"
    );
    for point in &points {
        println!(
            "{:>10} {:>20.4} {:>13.1}%",
            point.value, point.best_mean_test_acc, point.cost_percent
        );
    }
    println!("reports written to {}", out.display());
    if points.iter().any(|p| !p.invariants_ok) {
        bail!("invariant violation in at least one sweep point");
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let mut printed = false;
    for name in ["repeats_summary.csv", "sweep_summary.csv", "summary.csv"] {
        let path = dir.join(name);
        if path.exists() {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            println!("== {name} ==");
            for line in text.lines() {
                println!("  {}", line.replace(',', "\t"));
            }
            printed = true;
            break;
        }
    }
    let costs = dir.join("costs.csv");
    if costs.exists() {
        let text = std::fs::read_to_string(&costs)?;
        if let Some(last) = text.lines().last() {
            let fields: Vec<&str> = last.split(',').collect();
            if fields.len() >= 5 {
                println!(
                    "final traffic: {} uploads, {} downloads (cumulative)",
                    fields[3], fields[4]
                );
            }
        }
        printed = true;
    }
    if !printed {
        bail!("no report files found in {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    // Die quietly instead of panicking when stdout is a closed pipe
    // (e.g. `umpfssl run ... | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }

    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Partition(args) => cmd_partition(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep {
            common,
            axis,
            values,
        } => cmd_sweep(common, axis, values),
        Command::Report { dir } => cmd_report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
