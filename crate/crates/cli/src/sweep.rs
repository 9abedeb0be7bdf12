//! One-axis throughput sweeps.
//!
//! Each point is an ordinary experiment written to its own subdirectory.
//! The combined CSV is the source of truth; the plot and the fit are both
//! computed from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Runtime, SweepAxis};
use crate::experiment::run_experiment;
use crate::plot::LineChart;
use crate::CliError;

pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const SWEEP_PLOT_FILE: &str = "throughput.svg";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";

/// One row of the combined CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub status: String,
    pub throughput: Option<f64>,
    pub wall_secs: Option<f64>,
    pub final_return: Option<f32>,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of throughput against the axis value.
    pub slope: f64,
    pub intercept: f64,
    /// Measured speed-up from the first to the last successful point
    /// divided by the ratio of their axis values.
    pub efficiency: f64,
    pub csv_path: PathBuf,
    pub plot_path: PathBuf,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

/// The experiment for one sweep point.
pub fn point_config(base: &ExperimentConfig, axis: SweepAxis, value: usize) -> Result<ExperimentConfig, String> {
    let mut c = base.clone();
    c.sweep = None;
    match (axis, c.runtime) {
        (SweepAxis::Cores, Runtime::Anakin) => {
            c.mesh.num_cores = value;
            if let Some(a) = c.anakin.as_mut() {
                a.num_cores = value;
            }
            c.mesh.executor_threads = c.mesh.executor_threads.map(|t| t.min(value.max(1)));
        }
        (SweepAxis::Cores, Runtime::Sebulba) => {
            // One host whose cores are split one actor core per three
            // learner cores, rounding towards more learners.
            if value < 2 {
                return Err(format!("sebulba needs at least 2 cores, got {value}"));
            }
            c.mesh.num_cores = value;
            c.mesh.cores_per_host = value;
            let s = c.sebulba.as_mut().ok_or("missing [sebulba] table")?;
            s.actor_cores = (value / 4).max(1);
            s.learner_cores = value - s.actor_cores;
            s.replicas = 1;
        }
        (_, Runtime::Anakin) => return Err(format!("axis {} needs the sebulba runtime", axis.name())),
        (SweepAxis::ActorBatch, Runtime::Sebulba) => {
            c.sebulba.as_mut().ok_or("missing [sebulba] table")?.actor_batch = value;
        }
        (SweepAxis::ThreadsPerActorCore, Runtime::Sebulba) => {
            c.sebulba.as_mut().ok_or("missing [sebulba] table")?.threads_per_actor_core = value;
        }
        (SweepAxis::Replicas, Runtime::Sebulba) => {
            c.sebulba.as_mut().ok_or("missing [sebulba] table")?.replicas = value;
            c.mesh.num_cores = value * c.mesh.cores_per_host;
            c.mesh.executor_threads = c.mesh.executor_threads.map(|t| t * value.max(1));
        }
    }
    c.validate(None, &format!("{}={value}", axis.name())).map_err(|e| e.message)?;
    Ok(c)
}

/// Least-squares line through `pts`; NaNs when fewer than two distinct x.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if pts.len() < 2 || sxx == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Speed-up of the last point over the first relative to ideal linear scaling.
pub fn scaling_efficiency(pts: &[(f64, f64)]) -> f64 {
    let mut sorted = pts.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    match (sorted.first(), sorted.last()) {
        (Some(a), Some(b)) if b.0 > a.0 && a.1 > 0.0 && a.0 > 0.0 => (b.1 / a.1) / (b.0 / a.0),
        _ => f64::NAN,
    }
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    rdr.deserialize()
        .collect::<Result<Vec<SweepRow>, _>>()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Render the throughput plot from a sweep CSV alone.
pub fn plot_from_csv(csv_path: &Path, throughput_label: &str) -> Result<String, CliError> {
    let rows = read_sweep_csv(csv_path)?;
    let axis = rows.first().map(|r| r.axis.clone()).unwrap_or_default();
    let points = rows
        .iter()
        .filter_map(|r| r.throughput.map(|t| (r.value as f64, t)))
        .collect();
    Ok(LineChart {
        title: format!("Throughput against {axis}"),
        x_label: axis,
        y_label: throughput_label.to_string(),
        points,
    }
    .to_svg())
}

/// Run every point of `config.sweep`, continuing past failed points.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<SweepReport, CliError> {
    let spec = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Usage("the sweep command needs a [sweep] table".into()))?;
    if spec.values.is_empty() {
        return Err(CliError::Usage("sweep has no values".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let dir = out.join(format!("{}_{value}", spec.axis.name()));
        let outcome = point_config(config, spec.axis, value)
            .and_then(|c| run_experiment(&c, &dir, false).map_err(|e| e.to_string()));
        let row = match outcome {
            Ok(s) => SweepRow {
                axis: spec.axis.name().into(),
                value,
                status: "ok".into(),
                throughput: Some(s.throughput),
                wall_secs: Some(s.wall_secs),
                final_return: s.final_return,
                error: String::new(),
            },
            Err(e) => {
                eprintln!("sweep point {}={value} failed: {e}", spec.axis.name());
                SweepRow {
                    axis: spec.axis.name().into(),
                    value,
                    status: "failed".into(),
                    throughput: None,
                    wall_secs: None,
                    final_return: None,
                    error: e,
                }
            }
        };
        rows.push(row);
    }

    let csv_path = out.join(SWEEP_CSV_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    drop(w);

    // Everything below is derived from the file just written.
    let from_disk = read_sweep_csv(&csv_path)?;
    let pts: Vec<(f64, f64)> = from_disk
        .iter()
        .filter_map(|r| r.throughput.map(|t| (r.value as f64, t)))
        .collect();
    let (slope, intercept) = linear_fit(&pts);
    let efficiency = scaling_efficiency(&pts);
    let unit = match config.runtime {
        Runtime::Anakin => "env steps / s",
        Runtime::Sebulba => "frames / s",
    };
    let plot_path = out.join(SWEEP_PLOT_FILE);
    fs::write(&plot_path, plot_from_csv(&csv_path, unit)?)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", plot_path.display())))?;
    let report = SweepReport {
        axis: spec.axis,
        rows: from_disk,
        slope,
        intercept,
        efficiency,
        csv_path,
        plot_path,
    };
    let summary = serde_json::json!({
        "axis": spec.axis.name(),
        "slope": finite_or_null(slope),
        "intercept": finite_or_null(intercept),
        "efficiency": finite_or_null(efficiency),
        "points": report.rows.len(),
        "failures": report.failures(),
    });
    fs::write(
        out.join(SWEEP_SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(report)
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}
