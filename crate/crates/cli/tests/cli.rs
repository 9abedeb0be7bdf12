use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use podracer_cli::config::ExperimentConfig;

fn podracer(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_podracer"));
    cmd.args(args).env_remove("PODRACER_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL_ANAKIN: &str = r#"runtime = "anakin"
seed = 5

[mesh]
num_cores = 2

[anakin]
num_cores = 2
batch_per_core = 4
unroll_length = 8
total_steps = 3200
log_interval = 10

[agent]
hidden_dim = 16
learning_rate = 0.01
"#;

const SMALL_SEBULBA: &str = r#"runtime = "sebulba"

[mesh]
num_cores = 4
cores_per_host = 4

[sebulba]
actor_cores = 1
learner_cores = 2
actor_batch = 4
trajectory_length = 4
total_frames = 320
log_interval = 5

[agent]
hidden_dim = 16
"#;

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn anakin_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", SMALL_ANAKIN);
    let out = dir.path().join("out");
    let o = podracer(&["anakin", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.csv", "checkpoint.bin", "transfers.json", "config.resolved.toml"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("update,env_steps,mean_return,loss,steps_per_sec\n"));
    assert_eq!(csv.lines().count(), 1 + 5);
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("transfers.json")).unwrap()).unwrap();
    assert_eq!(stats["after_init"]["0"]["h2d_bytes"], 0);
}

#[test]
fn same_config_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", SMALL_ANAKIN);
    let run = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        let o = podracer(
            &["anakin", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap(), "--seed", seed],
            &[],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("checkpoint.bin")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn resolved_config_relaunches_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", SMALL_ANAKIN);
    let first = dir.path().join("first");
    let o = podracer(
        &["anakin", "--config", cfg.to_str().unwrap(), "--output-dir", first.to_str().unwrap(), "--seed", "12"],
        &[("PODRACER_THREADS", "1")],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = first.join("config.resolved.toml");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 12") && text.contains("executor_threads = 1"), "{text}");
    let second = dir.path().join("second");
    let o = podracer(
        &["anakin", "--config", resolved.to_str().unwrap(), "--output-dir", second.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join("checkpoint.bin")).unwrap(),
        fs::read(second.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn sebulba_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL_SEBULBA);
    let out = dir.path().join("out");
    let o = podracer(&["sebulba", "--config", cfg.to_str().unwrap(), "--output_dir", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(out.join("checkpoint.bin").exists());
}

#[test]
fn oversubscribed_sebulba_host_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_SEBULBA.replace("learner_cores = 2", "learner_cores = 4");
    let cfg = write(dir.path(), "s.toml", &text);
    let o = podracer(&["sebulba", "--config", cfg.to_str().unwrap(), "--output-dir", "unused"], &[]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("actor_cores + learner_cores") && err.contains("cores_per_host"), "{err}");
    assert!(err.contains("s.toml:8:"), "{err}");
    assert!(!Path::new("unused").exists());
}

#[test]
fn unknown_key_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_ANAKIN.replace("[agent]\n", "[agent]\nlearnig_rate = 0.1\n");
    let cfg = write(dir.path(), "a.toml", &text);
    let o = podracer(&["anakin", "--config", cfg.to_str().unwrap(), "--output-dir", "unused"], &[]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("a.toml:15:") && err.contains("learnig_rate"), "{err}");
}

#[test]
fn other_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let anakin = write(dir.path(), "a.toml", SMALL_ANAKIN);
    let a = anakin.to_str().unwrap();
    // Wrong subcommand for the runtime.
    assert_eq!(code(&podracer(&["sebulba", "--config", a, "--output-dir", "x"], &[])), 2);
    // Nowhere to write.
    assert_eq!(code(&podracer(&["anakin", "--config", a], &[])), 2);
    // Unreadable file.
    assert_eq!(code(&podracer(&["anakin", "--config", "/nonexistent.toml"], &[])), 2);
    // Bad thread cap.
    assert_eq!(code(&podracer(&["anakin", "--config", a, "--output-dir", "x"], &[("PODRACER_THREADS", "0")])), 2);
    // Sweep without a sweep table, and with an empty one.
    assert_eq!(code(&podracer(&["sweep", "--config", a, "--output-dir", "x"], &[])), 2);
    let empty = write(dir.path(), "e.toml", &format!("{SMALL_ANAKIN}\n[sweep]\naxis = \"cores\"\nvalues = []\n"));
    let o = podracer(&["sweep", "--config", empty.to_str().unwrap(), "--output-dir", "x"], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no values"));
}

#[test]
fn runtime_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.toml", SMALL_ANAKIN);
    let blocker = write(dir.path(), "blocker", "a file where a directory should be");
    let out = blocker.join("out");
    let o = podracer(&["anakin", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn anakin_core_sweep_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_ANAKIN.replace("num_cores = 2", "num_cores = 4") + "\n[sweep]\naxis = \"cores\"\nvalues = [1, 2, 4]\n";
    let cfg = write(dir.path(), "w.toml", &text);
    let out = dir.path().join("sweep");
    let o = podracer(&["sweep", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = podracer_cli::sweep::read_sweep_csv(&out.join("sweep.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert!(rows.iter().all(|r| r.status == "ok" && r.throughput.unwrap() > 0.0));
    let svg = fs::read_to_string(out.join("throughput.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep_summary.json")).unwrap()).unwrap();
    assert!(summary["slope"].is_number());
    // The plot is a pure function of the CSV.
    assert_eq!(podracer_cli::sweep::plot_from_csv(&out.join("sweep.csv"), "env steps / s").unwrap(), svg);
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let (cfg, src) = ExperimentConfig::load(&path).unwrap();
            cfg.validate(Some(&src), &path.display().to_string()).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
