use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nbafl_cli::commands::{self, Context};
use nbafl_cli::{CliError, ExperimentConfig};

/// Testbed for convergence bounds of noisy federated averaging.
#[derive(Debug, Parser)]
#[command(name = "nbafl", version, about)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Overrides `output_dir` in the config; default `out`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Replace the config's seed list with this single seed. For
    /// `noise-moments` and `audit --self-test` it seeds the sampler.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write bounds.csv with every bound column for t = 0..=t_max.
    Bounds {
        /// Last round in the table (default: privacy.T).
        #[arg(long)]
        t_max: Option<u64>,
    },
    /// Run the simulator for every seed and write trajectory CSVs.
    Simulate,
    /// Check each inequality step against recorded trajectories.
    Audit {
        /// Trajectory CSVs to audit (default: the simulate output in --out-dir).
        #[arg(long, num_args = 1..)]
        trajectories: Vec<PathBuf>,
        /// Run the auditor on its built-in violation suite instead.
        #[arg(long)]
        self_test: bool,
    },
    /// Compare modelled, Monte-Carlo and exact noise-norm moments.
    NoiseMoments {
        /// Monte-Carlo sample count.
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
    },
    /// Simulate, bound and audit every point of the config's sweep.
    Sweep,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn context(cli: &Cli, config: Option<&ExperimentConfig>) -> Context {
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    Context { out_dir, workers: cli.workers }
}

// A closed stdout (e.g. piped into `head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn report(paths: &[PathBuf]) {
    for path in paths {
        emit(&format!("{}\n", path.display()));
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Audit { self_test: true, .. } = cli.command {
        let ctx = context(cli, None);
        let (path, outcome) = commands::cmd_self_test(&ctx, cli.seed_override.unwrap_or(0))?;
        let correct = outcome.cases.iter().filter(|c| c.correct).count();
        emit(&format!("{}\nself-test accuracy: {correct}/{}\n", path.display(), outcome.cases.len()));
        if outcome.accuracy < 1.0 {
            return Err(CliError::compute(nbafl_core::Error::Domain(format!(
                "self-test accuracy {} below 1",
                outcome.accuracy
            ))));
        }
        return Ok(());
    }

    let config = load_config(cli)?;
    let ctx = context(cli, Some(&config));
    match &cli.command {
        Command::Bounds { t_max } => report(&commands::cmd_bounds(&config, &ctx, *t_max)?),
        Command::Simulate => report(&commands::cmd_simulate(&config, &ctx)?),
        Command::Audit { trajectories, .. } => report(&commands::cmd_audit(&config, &ctx, trajectories)?),
        Command::NoiseMoments { samples } => {
            emit(&commands::cmd_noise_moments(&config, &ctx, *samples, cli.seed_override.unwrap_or(0))?)
        }
        Command::Sweep => report(&commands::cmd_sweep(&config, &ctx)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NBAFL_LOG", "error")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
