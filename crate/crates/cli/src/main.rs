use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsched::config::ExperimentConfig;
use fedsched::experiment::{self, ExperimentError, RecordFormat, Summary, SweepAxis};

#[derive(Debug, Parser)]
#[command(name = "fedsched", version, about = "Simulate federated cluster scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Output {
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for reports.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Per-task record format: csv or json.
    #[arg(long, default_value = "csv")]
    format: RecordFormat,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Run an experiment once per value of one axis.
    Sweep {
        config: PathBuf,
        /// workers, gm_count, lm_count or load.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Check a config without running it.
    ValidateConfig { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_summary(label: &str, s: &Summary) {
    match &s.allocation {
        Some(a) => println!(
            "{label}: {} tasks, median {:.6}s, p99 {:.6}s, max {:.6}s, repartitions {}, preemptions {}/{}, inconsistencies {}",
            s.tasks,
            a.median,
            a.p99,
            a.max,
            s.counters.repartitions,
            s.counters.preemptions,
            s.counters.preemption_attempts,
            s.counters.inconsistency_failures
        ),
        None => println!("{label}: no tasks scheduled"),
    }
    if s.unschedulable > 0 {
        println!("{label}: {} tasks could not fit on any node and were skipped", s.unschedulable);
    }
    if s.audit.violations > 0 {
        eprintln!("{label}: audit found {} violations", s.audit.violations);
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, output } => {
            let cfg = load(&config, output.seed)?;
            let report = experiment::run_experiment(&cfg)?;
            let summary = experiment::write_report(&report, cfg.seed, &output.out_dir, output.format)?;
            print_summary(cfg.scheduler.as_str(), &summary);
            println!("reports written to {}", output.out_dir.display());
        }
        Command::Sweep { config, axis, values, output } => {
            let cfg = load(&config, output.seed)?;
            let rows = experiment::run_sweep(&cfg, axis, &values, &output.out_dir, output.format)?;
            for r in &rows {
                print_summary(&format!("{}={}", r.axis, r.value), &r.summary);
            }
            println!("sweep written to {}", output.out_dir.join("sweep.csv").display());
        }
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            experiment::prepare(&cfg)?;
            println!("{}: ok", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
