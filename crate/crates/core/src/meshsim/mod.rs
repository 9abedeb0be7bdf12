//! A software model of one slice of an accelerator pod.
//!
//! Each simulated core has private memory (a table of [`DeviceBuffer`]s it
//! owns) and executes at most one program at a time. Data only moves between
//! memories through [`Mesh::put`], [`Mesh::get`], [`Mesh::device_transfer`]
//! and the all-reduce collectives, and every movement is counted in
//! [`TransferStats`].

mod collective;
mod executor;
mod tensor;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use collective::{pairwise_tree_sum, ReduceOp};
pub use tensor::{DType, HostTensor, TensorData};

use collective::{reduce_ordered, Rendezvous};
use executor::Executor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId(pub usize);

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum MeshError {
    #[error("invalid mesh configuration: {0}")]
    Config(String),
    #[error("core {core} does not exist on a mesh of {num_cores} cores")]
    UnknownCore { core: usize, num_cores: usize },
    #[error("buffer owned by core {owner} used by a program on core {core}; transfer it explicitly")]
    Ownership { owner: CoreId, core: CoreId },
    #[error("buffer {id} on core {owner} was already freed")]
    UseAfterFree { id: u64, owner: CoreId },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("collective group mismatch: {0}")]
    GroupMismatch(String),
    #[error("collective over cores {group:?} timed out after {timeout:?}; missing contributions from cores {missing:?}")]
    Deadlock {
        group: Vec<CoreId>,
        missing: Vec<CoreId>,
        timeout: Duration,
    },
    #[error("program on core {core} failed: {message}")]
    Program { core: CoreId, message: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Failure raised from inside a core program.
#[derive(Debug, Clone)]
pub struct ProgramError(pub String);

impl<E: std::error::Error> From<E> for ProgramError {
    fn from(e: E) -> Self {
        ProgramError(e.to_string())
    }
}

pub fn program_error(msg: impl Into<String>) -> ProgramError {
    ProgramError(msg.into())
}

fn default_cores_per_host() -> usize {
    8
}

fn default_timeout_secs() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub num_cores: usize,
    #[serde(default = "default_cores_per_host")]
    pub cores_per_host: usize,
    /// Named partitions of the cores into disjoint groups.
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<Vec<usize>>>,
    #[serde(default = "default_timeout_secs")]
    pub collective_timeout_secs: f64,
    /// Worker threads executing core programs; defaults to one per core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executor_threads: Option<usize>,
    /// Keep per-core program enter/exit timestamps.
    #[serde(default)]
    pub record_intervals: bool,
}

impl MeshConfig {
    pub fn new(num_cores: usize) -> Self {
        MeshConfig {
            num_cores,
            cores_per_host: default_cores_per_host(),
            groups: BTreeMap::new(),
            collective_timeout_secs: default_timeout_secs(),
            executor_threads: None,
            record_intervals: false,
        }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.num_cores == 0 {
            return Err(MeshError::Config("num_cores must be positive".into()));
        }
        if self.cores_per_host == 0 {
            return Err(MeshError::Config("cores_per_host must be positive".into()));
        }
        if self.num_cores > self.cores_per_host && self.num_cores % self.cores_per_host != 0 {
            return Err(MeshError::Config(format!(
                "cores_per_host ({}) must divide num_cores ({}) on a multi-host mesh",
                self.cores_per_host, self.num_cores
            )));
        }
        if !(self.collective_timeout_secs > 0.0) {
            return Err(MeshError::Config("collective_timeout_secs must be positive".into()));
        }
        if self.executor_threads == Some(0) {
            return Err(MeshError::Config("executor_threads must be positive".into()));
        }
        for (name, partition) in &self.groups {
            let mut seen = BTreeSet::new();
            for group in partition {
                if group.is_empty() {
                    return Err(MeshError::Config(format!("group partition '{name}' has an empty group")));
                }
                for &c in group {
                    if c >= self.num_cores {
                        return Err(MeshError::Config(format!(
                            "group partition '{name}' names core {c} but the mesh has {} cores",
                            self.num_cores
                        )));
                    }
                    if !seen.insert(c) {
                        return Err(MeshError::Config(format!(
                            "group partition '{name}' lists core {c} more than once"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ordered, duplicate-free set of cores taking part in a collective.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CoreGroup {
    members: Vec<CoreId>,
}

impl CoreGroup {
    pub fn new(members: Vec<CoreId>) -> Result<Self, MeshError> {
        if members.is_empty() {
            return Err(MeshError::GroupMismatch("empty core group".into()));
        }
        let unique: BTreeSet<_> = members.iter().collect();
        if unique.len() != members.len() {
            return Err(MeshError::GroupMismatch(format!("duplicate core in group {members:?}")));
        }
        Ok(CoreGroup { members })
    }

    pub fn range(start: usize, end: usize) -> Result<Self, MeshError> {
        Self::new((start..end).map(CoreId).collect())
    }

    pub fn members(&self) -> &[CoreId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, core: CoreId) -> bool {
        self.members.contains(&core)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreTransferStats {
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub d2d_bytes: u64,
    pub collectives: u64,
}

/// Per-core transfer counters, keyed by core index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransferStats {
    pub cores: BTreeMap<usize, CoreTransferStats>,
}

impl TransferStats {
    pub fn total(&self) -> CoreTransferStats {
        self.cores.values().fold(CoreTransferStats::default(), |a, s| CoreTransferStats {
            h2d_bytes: a.h2d_bytes + s.h2d_bytes,
            d2h_bytes: a.d2h_bytes + s.d2h_bytes,
            d2d_bytes: a.d2d_bytes + s.d2d_bytes,
            collectives: a.collectives + s.collectives,
        })
    }

    /// Counter increments since `earlier`.
    pub fn since(&self, earlier: &TransferStats) -> TransferStats {
        let cores = self
            .cores
            .iter()
            .map(|(k, s)| {
                let e = earlier.cores.get(k).copied().unwrap_or_default();
                (
                    *k,
                    CoreTransferStats {
                        h2d_bytes: s.h2d_bytes - e.h2d_bytes,
                        d2h_bytes: s.d2h_bytes - e.d2h_bytes,
                        d2d_bytes: s.d2d_bytes - e.d2d_bytes,
                        collectives: s.collectives - e.collectives,
                    },
                )
            })
            .collect();
        TransferStats { cores }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

#[derive(Default)]
struct CoreCounters {
    h2d: AtomicU64,
    d2h: AtomicU64,
    d2d: AtomicU64,
    collectives: AtomicU64,
    programs: AtomicU64,
    busy_ns: AtomicU64,
    tags: Mutex<BTreeSet<&'static str>>,
    intervals: Mutex<Vec<(Instant, Instant)>>,
}

#[derive(Default)]
struct CoreMemory {
    table: Mutex<HashMap<u64, Arc<HostTensor>>>,
}

struct BufferInner {
    id: u64,
    owner: CoreId,
    shape: Vec<usize>,
    dtype: DType,
    memory: Arc<CoreMemory>,
}

impl Drop for BufferInner {
    fn drop(&mut self) {
        self.memory.table.lock().remove(&self.id);
    }
}

/// Handle to a tensor resident in one core's memory. The memory is released
/// when the last handle is dropped or when [`Mesh::free`] is called.
#[derive(Clone)]
pub struct DeviceBuffer(Arc<BufferInner>);

impl DeviceBuffer {
    pub fn owner(&self) -> CoreId {
        self.0.owner
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn byte_size(&self) -> u64 {
        (self.0.shape.iter().product::<usize>() * self.0.dtype.size_of()) as u64
    }

    fn contents(&self) -> Result<Arc<HostTensor>, MeshError> {
        self.0
            .memory
            .table
            .lock()
            .get(&self.0.id)
            .cloned()
            .ok_or(MeshError::UseAfterFree {
                id: self.0.id,
                owner: self.0.owner,
            })
    }
}

impl fmt::Debug for DeviceBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceBuffer")
            .field("id", &self.0.id)
            .field("owner", &self.0.owner)
            .field("shape", &self.0.shape)
            .field("dtype", &self.0.dtype)
            .finish()
    }
}

struct MeshInner {
    config: MeshConfig,
    memories: Vec<Arc<CoreMemory>>,
    counters: Vec<Arc<CoreCounters>>,
    next_id: AtomicU64,
    rendezvous: Rendezvous,
    timeout: Duration,
    executor: Executor,
}

/// Shared handle to a simulated mesh. Cloning is cheap; all clones refer to
/// the same cores.
#[derive(Clone)]
pub struct Mesh(Arc<MeshInner>);

type ProgramResult = Result<Vec<HostTensor>, ProgramError>;

/// A program submitted to a core whose outputs have not been collected yet.
pub struct PendingRun {
    rx: Receiver<Result<Vec<DeviceBuffer>, MeshError>>,
}

impl PendingRun {
    pub fn wait(self) -> Result<Vec<DeviceBuffer>, MeshError> {
        self.rx
            .recv()
            .unwrap_or_else(|_| Err(MeshError::Unsupported("mesh shut down".into())))
    }
}

impl Mesh {
    pub fn new(config: MeshConfig) -> Result<Self, MeshError> {
        config.validate()?;
        let n = config.num_cores;
        let workers = config.executor_threads.unwrap_or(n);
        let timeout = Duration::from_secs_f64(config.collective_timeout_secs);
        Ok(Mesh(Arc::new(MeshInner {
            memories: (0..n).map(|_| Arc::new(CoreMemory::default())).collect(),
            counters: (0..n).map(|_| Arc::new(CoreCounters::default())).collect(),
            next_id: AtomicU64::new(0),
            rendezvous: Rendezvous::default(),
            timeout,
            executor: Executor::new(n, workers),
            config,
        })))
    }

    pub fn config(&self) -> &MeshConfig {
        &self.0.config
    }

    pub fn num_cores(&self) -> usize {
        self.0.config.num_cores
    }

    pub fn cores(&self) -> impl Iterator<Item = CoreId> {
        (0..self.num_cores()).map(CoreId)
    }

    pub fn host_of(&self, core: CoreId) -> usize {
        core.0 / self.0.config.cores_per_host
    }

    /// Group `index` of the named partition from the config.
    pub fn group(&self, partition: &str, index: usize) -> Option<CoreGroup> {
        let members = self.0.config.groups.get(partition)?.get(index)?;
        CoreGroup::new(members.iter().copied().map(CoreId).collect()).ok()
    }

    fn check_core(&self, core: CoreId) -> Result<(), MeshError> {
        if core.0 >= self.num_cores() {
            return Err(MeshError::UnknownCore {
                core: core.0,
                num_cores: self.num_cores(),
            });
        }
        Ok(())
    }

    fn counters(&self, core: CoreId) -> &CoreCounters {
        &self.0.counters[core.0]
    }

    fn install(&self, core: CoreId, tensor: Arc<HostTensor>) -> DeviceBuffer {
        install(&self.0.memories[core.0], &self.0.next_id, core, tensor)
    }

    /// Host to device transfer.
    pub fn put(&self, core: CoreId, tensor: HostTensor) -> Result<DeviceBuffer, MeshError> {
        self.check_core(core)?;
        self.counters(core).h2d.fetch_add(tensor.byte_size(), Ordering::Relaxed);
        Ok(self.install(core, Arc::new(tensor)))
    }

    /// Device to host transfer.
    pub fn get(&self, buffer: &DeviceBuffer) -> Result<HostTensor, MeshError> {
        let data = buffer.contents()?;
        self.counters(buffer.owner())
            .d2h
            .fetch_add(data.byte_size(), Ordering::Relaxed);
        Ok(HostTensor::clone(&data))
    }

    /// Copy a buffer into another core's memory without touching the host.
    pub fn device_transfer(&self, buffer: &DeviceBuffer, dst: CoreId) -> Result<DeviceBuffer, MeshError> {
        self.check_core(dst)?;
        let data = buffer.contents()?;
        self.counters(buffer.owner())
            .d2d
            .fetch_add(data.byte_size(), Ordering::Relaxed);
        Ok(self.install(dst, data))
    }

    /// Release a buffer's memory now; later reads through any handle fail.
    pub fn free(&self, buffer: &DeviceBuffer) {
        buffer.0.memory.table.lock().remove(&buffer.0.id);
    }

    /// Number of live buffers resident on `core`.
    pub fn live_buffers(&self, core: CoreId) -> usize {
        self.0.memories[core.0].table.lock().len()
    }

    /// Queue `program` on `core` and return without waiting for it.
    ///
    /// Inputs must be owned by `core`. Programs queued on one core run one at
    /// a time in submission order. `tag` labels the kind of work for the
    /// per-core program log.
    pub fn submit<F>(
        &self,
        core: CoreId,
        tag: &'static str,
        inputs: &[&DeviceBuffer],
        program: F,
    ) -> Result<PendingRun, MeshError>
    where
        F: FnOnce(&[Arc<HostTensor>]) -> ProgramResult + Send + 'static,
    {
        self.check_core(core)?;
        let mut data = Vec::with_capacity(inputs.len());
        for b in inputs {
            if b.owner() != core {
                return Err(MeshError::Ownership { owner: b.owner(), core });
            }
            data.push(b.contents()?);
        }
        let (tx, rx) = bounded(1);
        let memory = Arc::clone(&self.0.memories[core.0]);
        let counters = Arc::clone(&self.0.counters[core.0]);
        let record = self.0.config.record_intervals;
        let inner = Arc::downgrade(&self.0);
        let job = Box::new(move || {
            let start = Instant::now();
            let outcome = catch_unwind(AssertUnwindSafe(|| program(&data)));
            let end = Instant::now();
            drop(data);
            counters.programs.fetch_add(1, Ordering::Relaxed);
            counters
                .busy_ns
                .fetch_add((end - start).as_nanos() as u64, Ordering::Relaxed);
            counters.tags.lock().insert(tag);
            if record {
                counters.intervals.lock().push((start, end));
            }
            let result = match outcome {
                Ok(Ok(outputs)) => match inner.upgrade() {
                    Some(inner) => Ok(outputs
                        .into_iter()
                        .map(|t| install(&memory, &inner.next_id, core, Arc::new(t)))
                        .collect()),
                    None => Err(MeshError::Unsupported("mesh dropped while running".into())),
                },
                Ok(Err(e)) => Err(MeshError::Program { core, message: e.0 }),
                Err(panic) => {
                    let message = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "program panicked".into());
                    Err(MeshError::Program { core, message })
                }
            };
            let _ = tx.send(result);
        });
        self.0.executor.submit(core.0, job);
        Ok(PendingRun { rx })
    }

    /// Run `program` on `core` and wait for its outputs.
    pub fn run_on_core<F>(
        &self,
        core: CoreId,
        tag: &'static str,
        inputs: &[&DeviceBuffer],
        program: F,
    ) -> Result<Vec<DeviceBuffer>, MeshError>
    where
        F: FnOnce(&[Arc<HostTensor>]) -> ProgramResult + Send + 'static,
    {
        self.submit(core, tag, inputs, program)?.wait()
    }

    /// All-reduce over `group`.
    ///
    /// `buffers` may cover the whole group, in which case the reduction
    /// completes immediately, or only the members this caller drives; then
    /// the call blocks until the remaining members have been contributed by
    /// other threads, or fails with [`MeshError::Deadlock`] after the
    /// configured timeout. Results are returned in the order of `buffers`.
    pub fn all_reduce(
        &self,
        group: &CoreGroup,
        buffers: &[DeviceBuffer],
        op: ReduceOp,
    ) -> Result<Vec<DeviceBuffer>, MeshError> {
        if buffers.is_empty() {
            return Err(MeshError::GroupMismatch("no contributions".into()));
        }
        let mut seen = BTreeSet::new();
        for b in buffers {
            self.check_core(b.owner())?;
            if !group.contains(b.owner()) {
                return Err(MeshError::GroupMismatch(format!(
                    "core {} is not a member of {:?}",
                    b.owner(),
                    group.members()
                )));
            }
            if !seen.insert(b.owner()) {
                return Err(MeshError::GroupMismatch(format!(
                    "two contributions from core {}",
                    b.owner()
                )));
            }
        }
        for g in group.members() {
            self.check_core(*g)?;
        }
        let mut mine = Vec::with_capacity(buffers.len());
        for b in buffers {
            mine.push((b.owner(), b.contents()?));
        }
        let result = if buffers.len() == group.len() {
            mine.sort_by_key(|(c, _)| *c);
            let ordered: Vec<&HostTensor> = mine.iter().map(|(_, t)| t.as_ref()).collect();
            Arc::new(reduce_ordered(&ordered, op)?)
        } else {
            self.0
                .rendezvous
                .contribute(group.members(), mine.clone(), op, self.0.timeout)?
        };
        for (core, t) in &mine {
            let c = self.counters(*core);
            c.d2d.fetch_add(t.byte_size(), Ordering::Relaxed);
            c.collectives.fetch_add(1, Ordering::Relaxed);
        }
        Ok(buffers
            .iter()
            .map(|b| self.install(b.owner(), Arc::clone(&result)))
            .collect())
    }

    /// `psum`
    pub fn all_reduce_sum(&self, group: &CoreGroup, buffers: &[DeviceBuffer]) -> Result<Vec<DeviceBuffer>, MeshError> {
        self.all_reduce(group, buffers, ReduceOp::Sum)
    }

    /// `pmean`
    pub fn all_reduce_mean(&self, group: &CoreGroup, buffers: &[DeviceBuffer]) -> Result<Vec<DeviceBuffer>, MeshError> {
        self.all_reduce(group, buffers, ReduceOp::Mean)
    }

    pub fn stats(&self) -> TransferStats {
        let cores = self
            .0
            .counters
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    i,
                    CoreTransferStats {
                        h2d_bytes: c.h2d.load(Ordering::Relaxed),
                        d2h_bytes: c.d2h.load(Ordering::Relaxed),
                        d2d_bytes: c.d2d.load(Ordering::Relaxed),
                        collectives: c.collectives.load(Ordering::Relaxed),
                    },
                )
            })
            .collect();
        TransferStats { cores }
    }

    /// Kinds of programs that have run on `core`.
    pub fn program_tags(&self, core: CoreId) -> BTreeSet<&'static str> {
        self.counters(core).tags.lock().clone()
    }

    pub fn programs_run(&self, core: CoreId) -> u64 {
        self.counters(core).programs.load(Ordering::Relaxed)
    }

    /// Total time `core` has spent executing programs.
    pub fn busy_time(&self, core: CoreId) -> Duration {
        Duration::from_nanos(self.counters(core).busy_ns.load(Ordering::Relaxed))
    }

    /// Program enter/exit timestamps; empty unless `record_intervals` is set.
    pub fn intervals(&self, core: CoreId) -> Vec<(Instant, Instant)> {
        self.counters(core).intervals.lock().clone()
    }
}

fn install(memory: &Arc<CoreMemory>, next_id: &AtomicU64, core: CoreId, tensor: Arc<HostTensor>) -> DeviceBuffer {
    let id = next_id.fetch_add(1, Ordering::Relaxed);
    let inner = BufferInner {
        id,
        owner: core,
        shape: tensor.shape().to_vec(),
        dtype: tensor.dtype(),
        memory: Arc::clone(memory),
    };
    memory.table.lock().insert(id, tensor);
    DeviceBuffer(Arc::new(inner))
}
