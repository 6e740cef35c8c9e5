mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trm_core::posttrain::BudgetPlan;

#[derive(Parser)]
#[command(name = "trm", version, about = "Train, adapt and evaluate tiny recursive models on grid puzzles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on a data-mix manifest.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Validate and print the resolved plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Adapt a pre-trained checkpoint to new tasks, then vote on their tests.
    Posttrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a checkpoint on tasks with known solutions.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Plan post-training steps for a wall-clock budget.
    Plan {
        #[arg(long)]
        wall_hours: f64,
        #[arg(long, default_value_t = 0.0)]
        reserved_hours: f64,
        /// Measured seconds per optimizer step.
        #[arg(long)]
        step_seconds: f64,
        #[arg(long, default_value_t = 8.0)]
        flops_ratio: f64,
        #[arg(long, default_value_t = 4.0)]
        accelerator_ratio: f64,
        #[arg(long, default_value_t = 384)]
        batch_size: usize,
    },
    /// Report task-embedding cosine similarity for a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Step number stamped on the report.
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { run, dry_run } => commands::pretrain_cmd(&run.config, run.force, dry_run),
        Command::Posttrain { run, dry_run } => commands::posttrain_cmd(&run.config, run.force, dry_run),
        Command::Evaluate { run } => commands::evaluate_cmd(&run.config, run.force),
        Command::Plan {
            wall_hours,
            reserved_hours,
            step_seconds,
            flops_ratio,
            accelerator_ratio,
            batch_size,
        } => {
            let plan = BudgetPlan::new(
                flops_ratio,
                accelerator_ratio,
                wall_hours,
                reserved_hours,
                batch_size,
                step_seconds,
            )?;
            commands::plan_cmd(&plan)
        }
        Command::Diagnose {
            checkpoint,
            registry,
            output,
            force,
            step,
        } => commands::diagnose_cmd(&checkpoint, &registry, output.as_deref(), force, step),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
