mod commands;
mod config;
mod error;
mod input;
mod simulate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Output;
use crate::config::RunConfig;
use crate::error::{invalid, CliResult};

#[derive(Parser, Debug)]
#[command(name = "mixinf", version, about = "Simultaneous confidence sets and tests for mixed parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input CSV with columns cluster, y and optional x1..xp.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Directory for reports; the JSON report goes to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Significance level (overrides the config; default 0.05).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Seed for simulations (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulations.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use the reduced Monte Carlo rep count.
    #[arg(long, global = true)]
    fast: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Estimate variance components and fixed effects.
    Fit,
    /// EBLUPs of the cluster means with marginal and conditional standard errors.
    Predict,
    /// Test a linear hypothesis with the marginal and the conditional set.
    Test,
    /// Pairwise comparisons within a subset of clusters.
    Tukey,
    /// Shrink a rejected hypothesis onto the acceptance boundary.
    Project,
    /// Run Monte Carlo coverage and power experiments.
    Simulate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Fit => "fit",
            Self::Predict => "predict",
            Self::Test => "test",
            Self::Tukey => "tukey",
            Self::Project => "project",
            Self::Simulate => "simulate",
        }
    }
}

fn data_path(cli: &Cli) -> CliResult<&Path> {
    cli.data.as_deref().ok_or_else(|| invalid("--data is required for this command"))
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| invalid(format!("cannot start the worker pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let alpha = cfg.alpha(cli.alpha)?;
    let output: Output = match cli.command {
        Command::Fit => commands::fit(data_path(cli)?, &cfg)?,
        Command::Predict => commands::predict(data_path(cli)?, &cfg)?,
        Command::Test => commands::test(data_path(cli)?, &cfg, alpha)?,
        Command::Tukey => commands::tukey(data_path(cli)?, &cfg, alpha)?,
        Command::Project => commands::project(data_path(cli)?, &cfg, alpha)?,
        Command::Simulate => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            simulate::simulate(&cfg, &out, cli.seed, alpha, cli.fast)?
        }
    };
    let text = serde_json::to_string_pretty(&output.json).expect("serializable report");
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{}.json", cli.command.name())), text + "\n")?;
            if let Some(h) = output.human {
                print!("{h}");
            }
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
