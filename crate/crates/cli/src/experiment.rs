//! Running one configured experiment and writing its artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use podracer::anakin::{AnakinRun, ANAKIN_CSV_HEADER};
use podracer::meshsim::Mesh;
use podracer::sebulba::{sebulba_train, SEBULBA_CSV_HEADER};
use serde::Serialize;

use crate::config::{ExperimentConfig, Runtime};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRANSFERS_FILE: &str = "transfers.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Log rows averaged for the reported final return.
const FINAL_RETURN_WINDOW: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub runtime: Runtime,
    pub output_dir: PathBuf,
    pub updates: u64,
    /// Environment steps (frames) consumed.
    pub steps: u64,
    pub wall_secs: f64,
    /// Steps per second over the training loop.
    pub throughput: f64,
    /// Mean return over the last few logged windows, if any episode ended.
    pub final_return: Option<f32>,
}

fn final_return(returns: impl DoubleEndedIterator<Item = f32>) -> Option<f32> {
    let tail: Vec<f32> = returns.rev().filter(|r| r.is_finite()).take(FINAL_RETURN_WINDOW).collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f32>() / tail.len() as f32)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Run `config` (already validated and resolved) and write its artifacts
/// into `out`, which is created if needed.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, progress: bool) -> Result<RunSummary, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut resolved = config.clone();
    resolved.output_dir = Some(out.to_path_buf());
    resolved.sweep = None;
    write_file(&out.join(RESOLVED_CONFIG_FILE), resolved.to_toml().as_bytes())?;

    let mesh = Mesh::new(config.mesh.clone()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let runtime_err = |e: &dyn std::fmt::Display| CliError::Runtime(e.to_string());
    match config.runtime {
        Runtime::Anakin => {
            let ac = config.anakin_config().ok_or_else(|| CliError::Runtime("missing [anakin] table".into()))?;
            let updates = ac.num_updates();
            let mut run = AnakinRun::new(&mesh, ac, config.agent.clone()).map_err(|e| runtime_err(&e))?;
            let mut csv = format!("{ANAKIN_CSV_HEADER}\n");
            let start = Instant::now();
            let mut printed = 0;
            for _ in 0..updates {
                run.step().map_err(|e| runtime_err(&e))?;
                for row in &run.log()[printed..] {
                    if progress {
                        println!("{}", row.csv_line());
                    }
                    csv.push_str(&row.csv_line());
                    csv.push('\n');
                }
                printed = run.log().len();
            }
            let wall = start.elapsed().as_secs_f64();
            let steps = run.env_steps();
            let result = run.finish().map_err(|e| runtime_err(&e))?;
            write_file(&out.join(METRICS_FILE), csv.as_bytes())?;
            write_file(&out.join(CHECKPOINT_FILE), &result.params.to_checkpoint_bytes())?;
            let transfers = serde_json::json!({
                "total": result.transfers,
                "after_init": result.transfers_after_init,
            });
            write_file(
                &out.join(TRANSFERS_FILE),
                serde_json::to_string_pretty(&transfers).expect("stats serialize").as_bytes(),
            )?;
            Ok(RunSummary {
                runtime: Runtime::Anakin,
                output_dir: out.to_path_buf(),
                updates,
                steps,
                wall_secs: wall,
                throughput: steps as f64 / wall.max(1e-9),
                final_return: final_return(result.log.iter().map(|r| r.mean_return)),
            })
        }
        Runtime::Sebulba => {
            let sc = config.sebulba_config().ok_or_else(|| CliError::Runtime("missing [sebulba] table".into()))?;
            let result = sebulba_train(&mesh, &sc, &config.agent).map_err(|e| runtime_err(&e))?;
            let mut csv = format!("{SEBULBA_CSV_HEADER}\n");
            for row in &result.log {
                if progress {
                    println!("{}", row.csv_line());
                }
                csv.push_str(&row.csv_line());
                csv.push('\n');
            }
            write_file(&out.join(METRICS_FILE), csv.as_bytes())?;
            write_file(&out.join(CHECKPOINT_FILE), &result.params.to_checkpoint_bytes())?;
            let transfers = serde_json::json!({ "total": result.transfers });
            write_file(
                &out.join(TRANSFERS_FILE),
                serde_json::to_string_pretty(&transfers).expect("stats serialize").as_bytes(),
            )?;
            Ok(RunSummary {
                runtime: Runtime::Sebulba,
                output_dir: out.to_path_buf(),
                updates: result.updates,
                steps: result.frames,
                wall_secs: result.wall_time.as_secs_f64(),
                throughput: result.frames_per_sec,
                final_return: final_return(result.log.iter().map(|r| r.mean_return)),
            })
        }
    }
}

/// Print a one-line summary to stdout.
pub fn report(summary: &RunSummary) {
    let mut out = std::io::stdout().lock();
    let ret = summary.final_return.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
    let _ = writeln!(
        out,
        "{} finished: {} updates, {} steps in {:.2}s ({:.0} steps/s), final return {}, artifacts in {}",
        summary.runtime,
        summary.updates,
        summary.steps,
        summary.wall_secs,
        summary.throughput,
        ret,
        summary.output_dir.display()
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_return_skips_empty_windows() {
        assert_eq!(final_return([f32::NAN, f32::NAN].into_iter()), None);
        let r = final_return([0.0, 1.0, f32::NAN, 0.5].into_iter()).unwrap();
        assert!((r - 0.5).abs() < 1e-6);
        let many = (0..20).map(|i| i as f32);
        assert_eq!(final_return(many), Some(17.0));
    }
}
