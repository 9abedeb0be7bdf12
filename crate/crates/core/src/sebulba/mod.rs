//! Sebulba: actor cores run batched inference for host-stepped environments,
//! learner cores train on trajectory shards and push parameters back.
//!
//! Core layout for replica `r` with `c = cores_per_host`:
//! actor cores `[r·c, r·c + A)` and learner cores `[r·c + A, r·c + A + L)`.
//! All learner cores of all replicas form one all-reduce group.
//!
//! Backpressure uses credits: every replica owns `queue_capacity` credits, an
//! actor thread takes one before it starts a trajectory and the learner hands
//! it back once it has published the parameters trained on that trajectory.
//! Occupancy of the trajectory queue therefore never exceeds the capacity, and
//! with one actor thread and one credit the pipeline is exactly synchronous.

mod actor;
mod learner;
mod reference;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, AgentError};
use crate::envcore::{EnvError, Trajectory, WorkerPool, NUM_ACTIONS, OBS_DIM};
use crate::meshsim::{CoreGroup, CoreId, DeviceBuffer, Mesh, MeshConfig, MeshError, TransferStats};
use crate::numerics::{mlp_init, MlpDims, Params};
use crate::rng::RngKey;

pub use actor::{fetch_shards, ship_steps, ship_trajectory, StepBuffers, SHARD_TENSORS};
pub use reference::{sebulba_reference, split_update};

const ACTOR_STREAM: u64 = 0x5345_4255;
// Shared with Anakin so both runtimes start from the same parameters.
const PARAM_STREAM: u64 = 0x5041_5200;

#[derive(Debug, thiserror::Error)]
pub enum SebulbaError {
    #[error("invalid sebulba configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("actor thread {actor} failed: {message}")]
    Actor { actor: ActorId, message: String },
    #[error("learner cores disagree after update {update}: fingerprints {fingerprints:?}")]
    Desync { update: u64, fingerprints: Vec<u64> },
    #[error("trajectory queue closed before training finished")]
    QueueClosed,
}

fn default_actor_cores() -> usize {
    2
}
fn default_learner_cores() -> usize {
    6
}
fn one() -> usize {
    1
}
fn default_actor_batch() -> usize {
    48
}
fn default_trajectory_length() -> usize {
    16
}
fn default_queue_capacity() -> usize {
    4
}
fn default_log_interval() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SebulbaConfig {
    #[serde(default = "default_actor_cores")]
    pub actor_cores: usize,
    #[serde(default = "default_learner_cores")]
    pub learner_cores: usize,
    #[serde(default = "one")]
    pub threads_per_actor_core: usize,
    #[serde(default = "default_actor_batch")]
    pub actor_batch: usize,
    #[serde(default = "default_trajectory_length")]
    pub trajectory_length: usize,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "one")]
    pub replicas: usize,
    pub total_frames: u64,
    /// Set by whoever launches the run rather than read from a config block.
    #[serde(skip)]
    pub seed: u64,
    /// Sequential updates per trajectory, each on a slice along time.
    #[serde(default = "one")]
    pub split_updates: usize,
    /// Env worker threads per replica; defaults to one per actor thread.
    #[serde(default)]
    pub env_workers: Option<usize>,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    /// Artificial learner delay per update, for backpressure experiments.
    #[serde(default)]
    pub learner_delay_ms: u64,
}

impl SebulbaConfig {
    /// Config with the default core split and the given batch shape.
    pub fn new(actor_batch: usize, trajectory_length: usize, total_frames: u64) -> Self {
        SebulbaConfig {
            actor_cores: default_actor_cores(),
            learner_cores: default_learner_cores(),
            threads_per_actor_core: 1,
            actor_batch,
            trajectory_length,
            queue_capacity: default_queue_capacity(),
            replicas: 1,
            total_frames,
            seed: 0,
            split_updates: 1,
            env_workers: None,
            log_interval: default_log_interval(),
            learner_delay_ms: 0,
        }
    }

    pub fn validate(&self, mesh: &MeshConfig) -> Result<(), SebulbaError> {
        let fail = |m: String| Err(SebulbaError::Config(m));
        let positive = [
            ("actor_cores", self.actor_cores),
            ("learner_cores", self.learner_cores),
            ("threads_per_actor_core", self.threads_per_actor_core),
            ("actor_batch", self.actor_batch),
            ("trajectory_length", self.trajectory_length),
            ("queue_capacity", self.queue_capacity),
            ("replicas", self.replicas),
            ("split_updates", self.split_updates),
            ("log_interval", self.log_interval as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.env_workers == Some(0) {
            return fail("env_workers must be at least 1".into());
        }
        if self.actor_cores + self.learner_cores > mesh.cores_per_host {
            return fail(format!(
                "actor_cores + learner_cores ({} + {}) exceeds cores_per_host ({})",
                self.actor_cores, self.learner_cores, mesh.cores_per_host
            ));
        }
        if self.actor_batch % self.learner_cores != 0 {
            return fail(format!(
                "actor_batch {} is not divisible by learner_cores {}",
                self.actor_batch, self.learner_cores
            ));
        }
        if self.trajectory_length % self.split_updates != 0 {
            return fail(format!(
                "split_updates {} does not divide trajectory_length {}",
                self.split_updates, self.trajectory_length
            ));
        }
        let needed = self.replicas * mesh.cores_per_host;
        if needed > mesh.num_cores {
            return fail(format!(
                "{} replicas need {needed} cores but the mesh has {}",
                self.replicas, mesh.num_cores
            ));
        }
        Ok(())
    }

    pub fn frames_per_update(&self) -> u64 {
        (self.replicas * self.actor_batch * self.trajectory_length) as u64
    }

    pub fn num_updates(&self) -> u64 {
        self.total_frames.div_ceil(self.frames_per_update())
    }

    pub fn actor_threads_per_replica(&self) -> usize {
        self.actor_cores * self.threads_per_actor_core
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ActorId {
    pub replica: usize,
    pub core: CoreId,
    pub thread: usize,
}

impl std::fmt::Display for ActorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}/core{}/t{}", self.replica, self.core.0, self.thread)
    }
}

/// Root key of one actor thread; its env keys and acting keys derive from it.
pub fn actor_key(seed: u64, replica: usize, core_index: usize, thread: usize) -> RngKey {
    RngKey::from_seed(seed)
        .fold_in(ACTOR_STREAM)
        .fold_in(replica as u64)
        .fold_in(core_index as u64)
        .fold_in(thread as u64)
}

pub fn initial_params(seed: u64, agent: &AgentConfig) -> Result<Params, SebulbaError> {
    let dims = MlpDims {
        obs_dim: OBS_DIM,
        hidden_dim: agent.hidden_dim,
        num_actions: NUM_ACTIONS,
    };
    Ok(mlp_init(RngKey::from_seed(seed).fold_in(PARAM_STREAM), dims).map_err(AgentError::from)?)
}

/// Parameters resident on one actor core together with their version.
pub struct ParamVersion {
    pub version: u64,
    pub params: DeviceBuffer,
}

pub(crate) type ParamSlot = ArcSwap<ParamVersion>;

/// Reference to one trajectory already sharded onto the learner cores.
pub struct TrajectoryHandle {
    /// `shards[i]` holds the six trajectory tensors on learner core `i`.
    pub shards: Vec<Vec<DeviceBuffer>>,
    pub actor: ActorId,
    /// Parameter version used for each of the `T` steps.
    pub versions: Vec<u64>,
    pub(crate) archive: Option<Trajectory>,
}

impl TrajectoryHandle {
    pub fn oldest_version(&self) -> u64 {
        self.versions.iter().copied().min().unwrap_or(0)
    }
}

/// Counters shared by the threads of one replica.
#[derive(Default)]
pub(crate) struct ReplicaShared {
    returns: Mutex<(f64, u64)>,
    produced: AtomicU64,
    credit_waits: AtomicU64,
    max_occupancy: AtomicUsize,
    failed: AtomicBool,
    failure: Mutex<Option<SebulbaError>>,
}

impl ReplicaShared {
    fn fail(&self, e: SebulbaError) {
        self.failure.lock().get_or_insert(e);
        self.failed.store(true, Ordering::SeqCst);
    }

    fn note_occupancy(&self, n: usize) {
        self.max_occupancy.fetch_max(n, Ordering::Relaxed);
    }

    fn take_returns(&self) -> Option<f32> {
        let mut r = self.returns.lock();
        let out = (r.1 > 0).then(|| (r.0 / r.1 as f64) as f32);
        *r = (0.0, 0);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SebulbaLogRow {
    pub update: u64,
    pub frames: u64,
    pub mean_return: f32,
    pub frames_per_sec: f64,
    pub queue_occupancy: usize,
    pub mean_param_lag: f64,
}

pub const SEBULBA_CSV_HEADER: &str = "update,frames,mean_return,frames_per_sec,queue_occupancy,mean_param_lag";

impl SebulbaLogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.1},{},{:.3}",
            self.update, self.frames, self.mean_return, self.frames_per_sec, self.queue_occupancy, self.mean_param_lag
        )
    }
}

/// A consumed trajectory as the actor built it and as the learner saw it.
#[derive(Clone, Debug)]
pub struct ArchivedTrajectory {
    pub actor: ActorId,
    pub actor_side: Trajectory,
    pub learner_side: Trajectory,
    pub versions: Vec<u64>,
    pub consumed_at: u64,
}

#[derive(Clone, Debug, Default)]
pub struct SebulbaArchive {
    pub trajectories: Vec<ArchivedTrajectory>,
    /// `params[v]` is parameter version `v`.
    pub params: Vec<Params>,
}

/// Observation hooks that cost extra device-to-host traffic.
#[derive(Clone, Copy, Debug, Default)]
pub struct SebulbaOptions {
    /// Keep every consumed trajectory and every parameter version.
    pub archive: bool,
}

#[derive(Debug)]
pub struct SebulbaResult {
    pub params: Params,
    pub log: Vec<SebulbaLogRow>,
    pub updates: u64,
    pub frames: u64,
    pub wall_time: Duration,
    pub frames_per_sec: f64,
    pub transfers: TransferStats,
    /// Histogram of learner version minus oldest behavior version.
    pub lag_histogram: BTreeMap<u64, u64>,
    pub max_queue_occupancy: usize,
    pub credit_waits: u64,
    pub trajectories_produced: u64,
    pub trajectories_consumed: u64,
    pub trajectories_discarded: u64,
    /// Busy fraction of every actor core during the run.
    pub actor_busy: BTreeMap<CoreId, f64>,
    pub actor_cores: Vec<CoreId>,
    pub learner_cores: Vec<CoreId>,
    /// Learner-core fingerprints of each replica at the end.
    pub replica_fingerprints: Vec<u64>,
    pub archive: Option<SebulbaArchive>,
}

impl SebulbaResult {
    pub fn max_lag(&self) -> u64 {
        self.lag_histogram.keys().next_back().copied().unwrap_or(0)
    }
}

pub(crate) struct ReplicaLayout {
    pub replica: usize,
    pub actors: Vec<CoreId>,
    pub learners: Vec<CoreId>,
}

fn layouts(mesh: &MeshConfig, config: &SebulbaConfig) -> Vec<ReplicaLayout> {
    (0..config.replicas)
        .map(|r| {
            let base = r * mesh.cores_per_host;
            ReplicaLayout {
                replica: r,
                actors: (base..base + config.actor_cores).map(CoreId).collect(),
                learners: (base + config.actor_cores..base + config.actor_cores + config.learner_cores)
                    .map(CoreId)
                    .collect(),
            }
        })
        .collect()
}

pub fn sebulba_train(mesh: &Mesh, config: &SebulbaConfig, agent: &AgentConfig) -> Result<SebulbaResult, SebulbaError> {
    sebulba_train_with(mesh, config, agent, SebulbaOptions::default())
}

pub fn sebulba_train_with(
    mesh: &Mesh,
    config: &SebulbaConfig,
    agent: &AgentConfig,
    options: SebulbaOptions,
) -> Result<SebulbaResult, SebulbaError> {
    config.validate(mesh.config())?;
    agent.validate()?;
    let params = initial_params(config.seed, agent)?;
    let replicas = layouts(mesh.config(), config);
    let global = CoreGroup::new(replicas.iter().flat_map(|r| r.learners.clone()).collect())?;
    let all_actors: Vec<CoreId> = replicas.iter().flat_map(|r| r.actors.clone()).collect();
    let busy_before: Vec<Duration> = all_actors.iter().map(|&c| mesh.busy_time(c)).collect();

    let start = Instant::now();
    let reports = std::thread::scope(|scope| -> Result<Vec<learner::ReplicaReport>, SebulbaError> {
        let mut learner_handles = Vec::new();
        for layout in &replicas {
            let shared = Arc::new(ReplicaShared::default());
            let (queue_tx, queue_rx) = crossbeam_channel::bounded::<TrajectoryHandle>(config.queue_capacity);
            let (credit_tx, credit_rx) = crossbeam_channel::bounded::<()>(config.queue_capacity);
            for _ in 0..config.queue_capacity {
                credit_tx.send(()).expect("credit channel has room");
            }
            let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(0);
            let mut slots = Vec::new();
            for &core in &layout.actors {
                let buffer = mesh.put(core, params.to_host())?;
                slots.push(Arc::new(ArcSwap::from_pointee(ParamVersion { version: 0, params: buffer })));
            }
            let workers = config.env_workers.unwrap_or(config.actor_threads_per_replica());
            let pool = WorkerPool::new(workers)?;
            for (a, &core) in layout.actors.iter().enumerate() {
                for thread in 0..config.threads_per_actor_core {
                    let ctx = actor::ActorContext {
                        mesh: mesh.clone(),
                        id: ActorId { replica: layout.replica, core, thread },
                        key: actor_key(config.seed, layout.replica, a, thread),
                        layout: Arc::clone(params.layout()),
                        slot: Arc::clone(&slots[a]),
                        pool: Arc::clone(&pool),
                        learners: layout.learners.clone(),
                        config: config.clone(),
                        queue: queue_tx.clone(),
                        credits: credit_rx.clone(),
                        stop: stop_rx.clone(),
                        shared: Arc::clone(&shared),
                        archive: options.archive,
                    };
                    std::thread::Builder::new()
                        .name(format!("actor-{}", ctx.id))
                        .spawn_scoped(scope, move || ctx.run())
                        .map_err(|e| SebulbaError::Config(format!("cannot spawn actor thread: {e}")))?;
                }
            }
            drop(queue_tx);
            let ctx = learner::LearnerContext {
                mesh: mesh.clone(),
                replica: layout.replica,
                learners: layout.learners.clone(),
                global: global.clone(),
                slots,
                params: params.clone(),
                config: config.clone(),
                agent: agent.clone(),
                queue: queue_rx,
                credits: credit_tx,
                stop: stop_tx,
                shared,
                archive: options.archive,
            };
            let handle = std::thread::Builder::new()
                .name(format!("learner-r{}", layout.replica))
                .spawn_scoped(scope, move || ctx.run())
                .map_err(|e| SebulbaError::Config(format!("cannot spawn learner thread: {e}")))?;
            learner_handles.push(handle);
        }
        let mut reports = Vec::new();
        let mut first_err = None;
        for h in learner_handles {
            match h.join().expect("learner thread panicked") {
                Ok(r) => reports.push(r),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(reports),
        }
    })?;
    let wall_time = start.elapsed();

    let mut reports = reports.into_iter();
    let mut main = reports.next().expect("at least one replica");
    let mut replica_fingerprints = vec![main.final_params.fingerprint()];
    for r in reports {
        replica_fingerprints.push(r.final_params.fingerprint());
        for (k, v) in r.lag_histogram {
            *main.lag_histogram.entry(k).or_default() += v;
        }
        main.max_occupancy = main.max_occupancy.max(r.max_occupancy);
        main.credit_waits += r.credit_waits;
        main.produced += r.produced;
        main.consumed += r.consumed;
        main.discarded += r.discarded;
        if let (Some(a), Some(b)) = (main.archive.as_mut(), r.archive) {
            a.trajectories.extend(b.trajectories);
        }
    }
    let secs = wall_time.as_secs_f64().max(1e-9);
    let actor_busy = all_actors
        .iter()
        .zip(&busy_before)
        .map(|(&c, &before)| (c, (mesh.busy_time(c) - before).as_secs_f64() / secs))
        .collect();
    let frames = main.updates * config.frames_per_update();
    Ok(SebulbaResult {
        params: main.final_params,
        log: main.log,
        updates: main.updates,
        frames,
        wall_time,
        frames_per_sec: frames as f64 / secs,
        transfers: mesh.stats(),
        lag_histogram: main.lag_histogram,
        max_queue_occupancy: main.max_occupancy,
        credit_waits: main.credit_waits,
        trajectories_produced: main.produced,
        trajectories_consumed: main.consumed,
        trajectories_discarded: main.discarded,
        actor_busy,
        actor_cores: all_actors,
        learner_cores: global.members().to_vec(),
        replica_fingerprints,
        archive: main.archive,
    })
}
