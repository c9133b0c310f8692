use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use connplan_cli::commands::{cmd_plan, cmd_report, cmd_rollout, PlanOptions, RolloutOptions};
use connplan_cli::config::StopMode;
use connplan_cli::{CliError, CliResult};

/// Environment variable naming the default worker-thread count.
const WORKERS_VAR: &str = "CONNPLAN_WORKERS";

#[derive(Parser)]
#[command(
    name = "connplan",
    version,
    about = "Plans connectivity-preserving robot team trajectories and validates them under noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StopArg {
    /// Run until the transformed cost settles (offline profile).
    Converged,
    /// Run until the simulated planning budget is spent (online profile).
    Time,
}

impl From<StopArg> for StopMode {
    fn from(s: StopArg) -> Self {
        match s {
            StopArg::Converged => StopMode::Converged,
            StopArg::Time => StopMode::Time,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Plan the configured mission and write plan and trace files.
    Plan {
        /// Mission configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Directory for the emitted files.
        #[arg(long)]
        out: PathBuf,
        /// Root seed recorded in the plan file (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Stop rule override.
        #[arg(long, value_enum)]
        stop: Option<StopArg>,
        /// Per-segment planning budget in seconds; implies --stop time.
        #[arg(long)]
        time_budget_s: Option<f64>,
        /// Worker threads (default: $CONNPLAN_WORKERS, then all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Simulate noisy executions of a written plan.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the plan (rollout traces are written here too).
        #[arg(long)]
        out: PathBuf,
        /// Number of rollouts (overrides the config).
        #[arg(long)]
        rollouts: Option<usize>,
        /// Root seed; rollout i uses seed XOR i (overrides the plan file).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize the trace files in a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn worker_pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let threads = match workers {
        Some(w) => w,
        None => match std::env::var(WORKERS_VAR) {
            Ok(raw) => raw.parse().map_err(|_| {
                CliError::Usage(format!("{WORKERS_VAR} must be a thread count, got `{raw}`"))
            })?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build worker pool: {e}")))
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Plan {
            config,
            out,
            seed,
            stop,
            time_budget_s,
            workers,
        } => {
            let opts = PlanOptions {
                config,
                out,
                seed,
                stop: stop.map(StopMode::from),
                time_budget_s,
            };
            worker_pool(workers)?.install(|| cmd_plan(&opts))
        }
        Command::Rollout {
            config,
            out,
            rollouts,
            seed,
            workers,
        } => {
            let opts = RolloutOptions {
                config,
                out,
                rollouts,
                seed,
            };
            worker_pool(workers)?.install(|| cmd_rollout(&opts))
        }
        Command::Report { out } => cmd_report(&out),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(output) => print!("{output}"),
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}
