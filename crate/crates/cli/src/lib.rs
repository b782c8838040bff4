//! Command-line driver: dataset generation, training, evaluation, window
//! sweeps and gradient verification.

pub mod commands;
pub mod config;
pub mod gradcheck;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use hvector::eval::Condition;
use hvector::models::ModelKind;

use commands::{OutputLock, Session, SweepAxis};
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "hvector", version, about = "H-vector multi-speaker identification on synthetic data")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted sections take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model to build: h_vector, x_vector or att_x_vector.
    #[arg(long, global = true)]
    pub model: Option<ModelKind>,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train a model and write its loss curve and checkpoint.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint directory (defaults to the trained model under --out).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to one, two, three or multiple speakers.
        #[arg(long)]
        condition: Option<Condition>,
    },
    /// Train and evaluate across window lengths and/or steps.
    Sweep {
        #[arg(long, value_enum, default_value = "both")]
        axis: SweepAxis,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        /// Break the sigmoid backward rule to confirm the check fails.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        bail!("--threads must be at least 1");
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Parse arguments, run the command and return the process exit code.
/// Failures are reported on stderr as a single `error: ...` line.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.common.threads)?;
    if let Command::Gradcheck { inject_fault } = cli.command {
        let fault = inject_fault.then_some(gradcheck::Fault::SigmoidBackward);
        let started = std::time::Instant::now();
        let report = gradcheck::run(fault)?;
        print!("{}", report.table());
        println!(
            "max relative error {:.3e} (tolerance {:.0e}, step {:.0e})",
            report.max_error(),
            report.tolerance,
            report.step
        );
        if !report.passed {
            let failed: Vec<String> = report
                .rows
                .iter()
                .filter(|r| !r.passed)
                .map(|r| format!("{}/{}", r.check, r.block))
                .collect();
            bail!("gradcheck failed for {}", failed.join(", "));
        }
        eprintln!("gradcheck took {:.1}s", started.elapsed().as_secs_f64());
        return Ok(());
    }

    let overrides = Overrides {
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        model: cli.common.model,
    };
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    match cli.command {
        Command::GenData => {
            let out = commands::gen_data(&Session::new(cfg, "gen-data"))?;
            println!("{}", out.summary());
        }
        Command::Train => {
            let out = commands::train_cmd(&Session::new(cfg, "train"))?;
            println!("{}", out.summary());
        }
        Command::Eval { checkpoint, condition } => {
            let out = commands::eval_cmd(&Session::new(cfg, "eval"), checkpoint.as_deref(), condition)?;
            println!("{}", out.summary());
        }
        Command::Sweep { axis } => {
            println!("{}", commands::SWEEP_HEADER);
            let out = commands::sweep_cmd(&Session::new(cfg, "sweep"), axis, |row| println!("{}", row.csv()))?;
            println!("-> {}", out.path.display());
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}
