use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use podracer_cli::config::{parse_thread_cap, Overrides};
use podracer_cli::{run, CliError, Command};

#[derive(Parser)]
#[command(name = "podracer", version, about = "Anakin and Sebulba runtimes on a simulated accelerator mesh")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with the fused on-device runtime.
    Anakin(RunArgs),
    /// Train with the actor/learner runtime.
    Sebulba(RunArgs),
    /// Run a one-axis throughput sweep.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "output-dir", alias = "output_dir")]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Anakin(a) => (Command::Anakin, a),
        Cmd::Sebulba(a) => (Command::Sebulba, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    let result = std::env::var("PODRACER_THREADS")
        .ok()
        .map(|raw| parse_thread_cap(&raw))
        .transpose()
        .map_err(CliError::from)
        .and_then(|max_threads| {
            let overrides = Overrides {
                seed: args.seed,
                output_dir: args.output_dir,
                max_threads,
            };
            run(command, &args.config, &overrides)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
