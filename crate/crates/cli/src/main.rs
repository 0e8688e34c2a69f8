use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdreplica_cli::{run_single, run_sweep, validate_config, CliError, RunConfig, SweepOutcome, SweepSpec, Task};

/// Replica theory and simulation of multi-stage self-distillation.
#[derive(Parser)]
#[command(name = "sdreplica", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the order-parameter chain for the `[schedule]` table.
    Solve(RunArgs),
    /// Tune the schedule as described by the `[search]` table.
    Optimize(RunArgs),
    /// Tuned error of every stage up to `[curve] t_max`.
    Curve(RunArgs),
    /// Simulate finite-size chains and compare them with the theory.
    Agree(RunArgs),
    /// Run the `[sweep]` grid.
    Sweep(RunArgs),
    /// Check a configuration and print it with every default filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Validate for this task instead of the `[sweep]` table's.
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "SDREPLICA_OUT", default_value = "sdreplica-out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip grid points already recorded in the output directory's journal.
    #[arg(long)]
    resume: bool,
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::ALL
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| format!("unknown task `{s}`"))
}

fn spec(args: &RunArgs) -> Result<SweepSpec, CliError> {
    let (mut config, src) = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.override_seed(seed);
    }
    Ok(SweepSpec {
        config,
        source: Some(src),
        out: args.out.clone(),
        jobs: args.jobs,
        resume: args.resume,
    })
}

fn run(cmd: Command) -> Result<Option<SweepOutcome>, CliError> {
    let single = |args: &RunArgs, task| -> Result<Option<SweepOutcome>, CliError> {
        let s = spec(args)?;
        if let Some(j) = s.jobs {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
        }
        run_single(&s, task).map(Some)
    };
    match cmd {
        Command::Solve(a) => single(&a, Task::Solve),
        Command::Optimize(a) => single(&a, Task::Optimize),
        Command::Curve(a) => single(&a, Task::MultiStageCurve),
        Command::Agree(a) => single(&a, Task::Agreement),
        Command::Sweep(a) => run_sweep(&spec(&a)?).map(Some),
        Command::Validate { config, task } => {
            print!("{}", validate_config(&config, task)?);
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Some(o)) => {
            eprintln!(
                "{} points ({} resumed, {} failed); outputs in {}",
                o.points,
                o.resumed,
                o.failed,
                o.files.first().and_then(|p| p.parent()).map(|p| p.display().to_string()).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
