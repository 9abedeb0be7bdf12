//! Experiment configuration files.
//!
//! A config is a TOML document with a handful of top-level keys and one
//! table per subsystem:
//!
//! ```toml
//! runtime = "anakin"
//! seed = 3
//! output_dir = "runs/catch"
//!
//! [mesh]
//! num_cores = 8
//!
//! [anakin]
//! num_cores = 8
//! batch_per_core = 1
//! unroll_length = 16
//! total_steps = 2_000_000
//!
//! [agent]
//! learning_rate = 0.02
//! ```
//!
//! Every table rejects unknown keys. Errors carry the line they refer to.

use std::fmt;
use std::path::{Path, PathBuf};

use podracer::agent::AgentConfig;
use podracer::anakin::AnakinConfig;
use podracer::meshsim::MeshConfig;
use podracer::sebulba::{SebulbaConfig, SebulbaError};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Runtime {
    Anakin,
    Sebulba,
}

impl fmt::Display for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Runtime::Anakin => "anakin",
            Runtime::Sebulba => "sebulba",
        })
    }
}

/// The quantity a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Cores,
    ActorBatch,
    Replicas,
    ThreadsPerActorCore,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Cores => "cores",
            SweepAxis::ActorBatch => "actor_batch",
            SweepAxis::Replicas => "replicas",
            SweepAxis::ThreadsPerActorCore => "threads_per_actor_core",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub runtime: Runtime,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub mesh: MeshConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anakin: Option<AnakinConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sebulba: Option<SebulbaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub source_name: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source_name, l, self.message),
            None => write!(f, "{}: {}", self.source_name, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Command-line and environment adjustments applied on top of a file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Upper bound on simulated-mesh worker threads.
    pub max_threads: Option<usize>,
}

/// Parse the `PODRACER_THREADS` value.
pub fn parse_thread_cap(raw: &str) -> Result<usize, ConfigError> {
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(ConfigError {
            source_name: "PODRACER_THREADS".into(),
            line: None,
            message: format!("expected a positive integer, found '{raw}'"),
        }),
    }
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of `key` inside `[section]` (top level when `section` is empty),
/// falling back to the section header and then to the first line.
pub fn locate(src: &str, section: &str, key: Option<&str>) -> usize {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let Some(k) = key {
            if let Some((lhs, _)) = line.split_once('=') {
                if lhs.trim().trim_matches('"') == k {
                    return i + 1;
                }
            }
        }
    }
    header_line.unwrap_or(1)
}

const MESH_FIELDS: &[&str] = &[
    "num_cores",
    "cores_per_host",
    "groups",
    "collective_timeout_secs",
    "executor_threads",
    "record_intervals",
];
const AGENT_FIELDS: &[&str] = &[
    "discount",
    "entropy_cost",
    "value_cost",
    "rho_clip",
    "learning_rate",
    "momentum",
    "hidden_dim",
];
const ANAKIN_FIELDS: &[&str] = &["num_cores", "batch_per_core", "unroll_length", "total_steps", "log_interval"];
const SEBULBA_FIELDS: &[&str] = &[
    "actor_cores",
    "learner_cores",
    "threads_per_actor_core",
    "actor_batch",
    "trajectory_length",
    "queue_capacity",
    "replicas",
    "total_frames",
    "split_updates",
    "env_workers",
    "log_interval",
    "learner_delay_ms",
];

/// The field of `fields` named earliest in `message`.
fn first_named_field<'a>(message: &str, fields: &[&'a str]) -> Option<&'a str> {
    fields
        .iter()
        .filter_map(|f| message.find(f).map(|pos| (pos, *f)))
        .min_by_key(|&(pos, f)| (pos, std::cmp::Reverse(f.len())))
        .map(|(_, f)| f)
}

impl ExperimentConfig {
    /// Parse a config document. `source_name` is used in error messages.
    pub fn parse(src: &str, source_name: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| ConfigError {
            source_name: source_name.to_string(),
            line: e.span().map(|s| line_of_offset(src, s.start)),
            message: e.message().trim().to_string(),
        })
    }

    /// Read and parse a config file, returning the text alongside.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let name = path.display().to_string();
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source_name: name.clone(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        let cfg = Self::parse(&src, &name)?;
        Ok((cfg, src))
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = Some(dir.clone());
        }
        if let Some(cap) = overrides.max_threads {
            let wanted = self.mesh.executor_threads.unwrap_or(self.mesh.num_cores);
            self.mesh.executor_threads = Some(wanted.min(cap));
        }
    }

    /// Check every cross-field constraint; `src` (the original text, if any)
    /// is used to point at the offending line.
    pub fn validate(&self, src: Option<&str>, source_name: &str) -> Result<(), ConfigError> {
        let err = |section: &str, key: Option<&str>, message: String| ConfigError {
            source_name: source_name.to_string(),
            line: src.map(|s| locate(s, section, key)),
            message,
        };
        self.mesh
            .validate()
            .map_err(|e| err("mesh", first_named_field(&e.to_string(), MESH_FIELDS), e.to_string()))?;
        self.agent
            .validate()
            .map_err(|e| err("agent", first_named_field(&e.to_string(), AGENT_FIELDS), e.to_string()))?;
        match self.runtime {
            Runtime::Anakin => {
                if self.sebulba.is_some() {
                    return Err(err("sebulba", None, "[sebulba] table given but runtime is \"anakin\"".into()));
                }
                let a = self
                    .anakin
                    .as_ref()
                    .ok_or_else(|| err("", Some("runtime"), "runtime \"anakin\" needs an [anakin] table".into()))?;
                a.validate()
                    .map_err(|e| err("anakin", first_named_field(&e.to_string(), ANAKIN_FIELDS), e.to_string()))?;
                if a.num_cores > self.mesh.num_cores {
                    return Err(err(
                        "anakin",
                        Some("num_cores"),
                        format!(
                            "anakin num_cores ({}) exceeds the mesh's num_cores ({})",
                            a.num_cores, self.mesh.num_cores
                        ),
                    ));
                }
            }
            Runtime::Sebulba => {
                if self.anakin.is_some() {
                    return Err(err("anakin", None, "[anakin] table given but runtime is \"sebulba\"".into()));
                }
                let s = self
                    .sebulba
                    .as_ref()
                    .ok_or_else(|| err("", Some("runtime"), "runtime \"sebulba\" needs a [sebulba] table".into()))?;
                s.validate(&self.mesh).map_err(|e| {
                    let msg = match &e {
                        SebulbaError::Config(m) => m.clone(),
                        other => other.to_string(),
                    };
                    err("sebulba", first_named_field(&msg, SEBULBA_FIELDS), e.to_string())
                })?;
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(err("sweep", Some("values"), "sweep has no values".into()));
            }
            let sebulba_only = !matches!(sweep.axis, SweepAxis::Cores);
            if sebulba_only && self.runtime == Runtime::Anakin {
                return Err(err(
                    "sweep",
                    Some("axis"),
                    format!("axis \"{}\" applies only to the sebulba runtime", sweep.axis.name()),
                ));
            }
        }
        Ok(())
    }

    pub fn anakin_config(&self) -> Option<AnakinConfig> {
        self.anakin.clone().map(|mut a| {
            a.seed = self.seed;
            a
        })
    }

    pub fn sebulba_config(&self) -> Option<SebulbaConfig> {
        self.sebulba.clone().map(|mut s| {
            s.seed = self.seed;
            s
        })
    }

    /// The fully defaulted config as TOML; launching it reproduces the run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ANAKIN: &str = r#"runtime = "anakin"
seed = 4

[mesh]
num_cores = 4

[anakin]
num_cores = 4
batch_per_core = 2
unroll_length = 8
total_steps = 1000
"#;

    const SEBULBA: &str = r#"runtime = "sebulba"

[mesh]
num_cores = 8

[sebulba]
actor_cores = 4
learner_cores = 5
actor_batch = 40
total_frames = 1000
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = ExperimentConfig::parse(ANAKIN, "a.toml").unwrap();
        assert_eq!(c.runtime, Runtime::Anakin);
        assert_eq!(c.mesh.cores_per_host, 8);
        assert_eq!(c.agent, AgentConfig::default());
        let a = c.anakin_config().unwrap();
        assert_eq!((a.seed, a.log_interval), (4, 100));
        c.validate(Some(ANAKIN), "a.toml").unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_with_its_line() {
        let src = ANAKIN.replace("unroll_length = 8", "unroll_length = 8\nunrol = 3");
        let e = ExperimentConfig::parse(&src, "a.toml").unwrap_err();
        assert_eq!(e.line, Some(11), "{e}");
        assert!(e.message.contains("unrol"), "{e}");
        assert!(e.to_string().starts_with("a.toml:11:"));
    }

    #[test]
    fn seed_is_not_accepted_inside_a_runtime_table() {
        let src = ANAKIN.replace("batch_per_core = 2", "batch_per_core = 2\nseed = 1");
        assert!(ExperimentConfig::parse(&src, "a.toml").is_err());
    }

    #[test]
    fn constraint_violation_points_at_the_key() {
        let c = ExperimentConfig::parse(SEBULBA, "s.toml").unwrap();
        let e = c.validate(Some(SEBULBA), "s.toml").unwrap_err();
        assert!(e.message.contains("actor_cores + learner_cores"), "{e}");
        assert!(e.message.contains("cores_per_host"), "{e}");
        assert_eq!(e.line, Some(7));
    }

    #[test]
    fn missing_runtime_table_is_reported() {
        let src = "runtime = \"sebulba\"\n[mesh]\nnum_cores = 2\n";
        let c = ExperimentConfig::parse(src, "x").unwrap();
        let e = c.validate(Some(src), "x").unwrap_err();
        assert_eq!(e.line, Some(1));
        assert!(e.message.contains("[sebulba]"));
    }

    #[test]
    fn overrides_apply_and_thread_cap_limits_workers() {
        let mut c = ExperimentConfig::parse(ANAKIN, "a").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            output_dir: Some("out".into()),
            max_threads: Some(2),
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.output_dir.as_deref(), Some(Path::new("out")));
        assert_eq!(c.mesh.executor_threads, Some(2));
        c.apply(&Overrides {
            max_threads: Some(16),
            ..Overrides::default()
        });
        assert_eq!(c.mesh.executor_threads, Some(2));
        assert!(parse_thread_cap("0").is_err());
        assert_eq!(parse_thread_cap(" 3 ").unwrap(), 3);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = ExperimentConfig::parse(SEBULBA, "s").unwrap();
        c.seed = 11;
        c.output_dir = Some("runs/x".into());
        let text = c.to_toml();
        let back = ExperimentConfig::parse(&text, "resolved").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.sebulba_config().unwrap().seed, 11);
    }

    #[test]
    fn sweep_needs_values_and_a_matching_runtime() {
        let empty = format!("{ANAKIN}\n[sweep]\naxis = \"cores\"\nvalues = []\n");
        let c = ExperimentConfig::parse(&empty, "w").unwrap();
        let e = c.validate(Some(&empty), "w").unwrap_err();
        assert!(e.message.contains("no values"));
        assert_eq!(e.line, Some(15));
        let wrong = format!("{ANAKIN}\n[sweep]\naxis = \"actor_batch\"\nvalues = [32]\n");
        let c = ExperimentConfig::parse(&wrong, "w").unwrap();
        assert!(c.validate(None, "w").unwrap_err().message.contains("sebulba"));
    }

    #[test]
    fn locate_prefers_key_then_header() {
        let src = "a = 1\n[x]\nb = 2\n[y]\nb = 3\n";
        assert_eq!(locate(src, "y", Some("b")), 5);
        assert_eq!(locate(src, "x", Some("missing")), 2);
        assert_eq!(locate(src, "", Some("a")), 1);
        assert_eq!(locate(src, "zz", None), 1);
    }
}
