use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tappfl_cli::config::{ExperimentConfig, Overrides};
use tappfl_cli::{runner, CliError};

/// Federated representation learning with an attribute-privacy objective.
#[derive(Parser)]
#[command(name = "tappfl", version, about, max_term_width = 100)]
struct Cli {
    /// TOML experiment config; omit to use built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<String>,
    /// Privacy weight override, in [0, 1].
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Federated round count override.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Device count override.
    #[arg(long, global = true)]
    devices: Option<usize>,
    /// Record real per-round wall times instead of zeros.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to CSV.
    GenData,
    /// Run one federated training and evaluate the result.
    Train,
    /// Run the defense grid at lambda 0 and tabulate the trade-offs.
    Baseline,
    /// Attack and probe a saved extractor checkpoint.
    Evaluate {
        /// Extractor checkpoint; defaults to <out>/checkpoints/global_extractor.txt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Verify the information-theoretic bounds on random instances.
    TheoryCheck,
    /// Train and evaluate every (lambda, seed) cell of the grid.
    Sweep,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        lambda: cli.lambda,
        rounds: cli.rounds,
        devices: cli.devices,
        timing: cli.timing,
    };
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &ov)?;
    match &cli.command {
        Command::GenData => runner::cmd_gen_data(&cfg),
        Command::Train => runner::cmd_train(&cfg),
        Command::Baseline => runner::cmd_baseline(&cfg),
        Command::Evaluate { checkpoint } => runner::cmd_evaluate(&cfg, checkpoint.as_deref()),
        Command::TheoryCheck => runner::cmd_theory_check(&cfg),
        Command::Sweep => runner::cmd_sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<CliError>() {
                Some(CliError::Config(_)) => 2,
                Some(CliError::Numeric(_)) => 3,
                None => 1,
            };
            ExitCode::from(code)
        }
    }
}
