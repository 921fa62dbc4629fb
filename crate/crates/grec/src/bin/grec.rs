use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grec::commands;
use grec::config::ExperimentConfig;
use grec::Error;

#[derive(Parser)]
#[command(name = "grec", about = "Multi-task recommender training and routing-cost harness")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel worker count for sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Seed override for model init, shuffling, and upsampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv plus a checkpoint.
    Train,
    /// Evaluate the checkpoint in the output directory on the test split.
    Eval,
    /// Train the experts x k grid over seeds and emit a long-format CSV.
    Sweep,
    /// Train all routing granularities plus the MMoE baseline on one seed.
    CompareRouting,
    /// Print the routing decision for one reference batch.
    DumpRouting,
}

fn run(cli: &Cli) -> grec::Result<()> {
    let mut cfg = ExperimentConfig::from_path(&cli.config)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cfg.out_dir.as_os_str().is_empty() {
        cfg.out_dir = PathBuf::from("runs");
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Sweep => commands::cmd_sweep(&cfg, cli.jobs),
        Command::CompareRouting => commands::cmd_compare_routing(&cfg, cli.jobs),
        Command::DumpRouting => commands::cmd_dump_routing(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
