//! Command-line front end for the podracer runtimes: experiment configs,
//! artifact writing and throughput sweeps.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod sweep;

use std::path::{Path, PathBuf};

use config::{ConfigError, ExperimentConfig, Overrides, Runtime};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    /// A config that parses but cannot be used for the requested command.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Anakin,
    Sebulba,
    Sweep,
}

/// Load, override and validate a config for `command`.
pub fn prepare(command: Command, path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let (mut cfg, src) = ExperimentConfig::load(path)?;
    let name = path.display().to_string();
    let mismatch = |want: Runtime| {
        CliError::Config(ConfigError {
            source_name: name.clone(),
            line: Some(config::locate(&src, "", Some("runtime"))),
            message: format!("the {want} command needs runtime = \"{want}\", found \"{}\"", cfg.runtime),
        })
    };
    match command {
        Command::Anakin if cfg.runtime != Runtime::Anakin => return Err(mismatch(Runtime::Anakin)),
        Command::Sebulba if cfg.runtime != Runtime::Sebulba => return Err(mismatch(Runtime::Sebulba)),
        Command::Sweep if cfg.sweep.is_none() => {
            return Err(CliError::Config(ConfigError {
                source_name: name,
                line: None,
                message: "the sweep command needs a [sweep] table".into(),
            }))
        }
        _ => {}
    }
    cfg.apply(overrides);
    cfg.validate(Some(&src), &name)?;
    if cfg.output_dir.is_none() {
        return Err(CliError::Config(ConfigError {
            source_name: name,
            line: None,
            message: "no output_dir in the config and no --output-dir given".into(),
        }));
    }
    Ok(cfg)
}

/// Everything behind one CLI invocation.
pub fn run(command: Command, path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let cfg = prepare(command, path, overrides)?;
    let out: PathBuf = cfg.output_dir.clone().expect("checked in prepare");
    match command {
        Command::Anakin | Command::Sebulba => {
            let summary = experiment::run_experiment(&cfg, &out, true)?;
            experiment::report(&summary);
        }
        Command::Sweep => {
            let report = sweep::run_sweep(&cfg, &out)?;
            for r in &report.rows {
                match r.throughput {
                    Some(t) => println!("{}={}: {:.0}/s", r.axis, r.value, t),
                    None => println!("{}={}: failed ({})", r.axis, r.value, r.error),
                }
            }
            println!(
                "slope {:.1}/s per unit, scaling efficiency {:.2}; wrote {} and {}",
                report.slope,
                report.efficiency,
                report.csv_path.display(),
                report.plot_path.display()
            );
            if report.failures() == report.rows.len() {
                return Err(CliError::Runtime("every sweep point failed".into()));
            }
        }
    }
    Ok(())
}
