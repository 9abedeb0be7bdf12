use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

use super::actor::fetch_shards;
use super::{
    ArchivedTrajectory, ParamSlot, ParamVersion, ReplicaShared, SebulbaArchive, SebulbaConfig, SebulbaError,
    SebulbaLogRow, TrajectoryHandle,
};
use crate::agent::{agent_gradients, AgentConfig};
use crate::envcore::Trajectory;
use crate::meshsim::{CoreGroup, CoreId, DeviceBuffer, HostTensor, Mesh};
use crate::numerics::{fingerprint, sgd_update, OptimizerState, ParamLayout, Params};

pub(crate) struct LearnerContext {
    pub mesh: Mesh,
    pub replica: usize,
    pub learners: Vec<CoreId>,
    pub global: CoreGroup,
    pub slots: Vec<Arc<ParamSlot>>,
    pub params: Params,
    pub config: SebulbaConfig,
    pub agent: AgentConfig,
    pub queue: Receiver<TrajectoryHandle>,
    pub credits: Sender<()>,
    /// Dropped to stop this replica's actor threads.
    pub stop: Sender<()>,
    pub shared: Arc<ReplicaShared>,
    pub archive: bool,
}

pub(crate) struct ReplicaReport {
    pub final_params: Params,
    pub log: Vec<SebulbaLogRow>,
    pub updates: u64,
    pub lag_histogram: BTreeMap<u64, u64>,
    pub max_occupancy: usize,
    pub credit_waits: u64,
    pub produced: u64,
    pub consumed: u64,
    pub discarded: u64,
    pub archive: Option<SebulbaArchive>,
}

struct LearnerCore {
    core: CoreId,
    params: DeviceBuffer,
    opt: DeviceBuffer,
}

impl LearnerContext {
    pub fn run(self) -> Result<ReplicaReport, SebulbaError> {
        let result = self.train();
        // Stop the actors, then discard whatever is still queued.
        let LearnerContext { stop, queue, shared, .. } = self;
        drop(stop);
        let mut discarded = 0;
        while queue.recv_timeout(Duration::from_millis(1)).is_ok() {
            discarded += 1;
        }
        let mut report = result?;
        report.discarded = discarded;
        report.produced = shared.produced.load(Ordering::Relaxed);
        report.credit_waits = shared.credit_waits.load(Ordering::Relaxed);
        report.max_occupancy = report.max_occupancy.max(shared.max_occupancy.load(Ordering::Relaxed));
        Ok(report)
    }

    fn next_handle(&self) -> Result<TrajectoryHandle, SebulbaError> {
        loop {
            if self.shared.failed.load(Ordering::SeqCst) {
                return Err(self
                    .shared
                    .failure
                    .lock()
                    .take()
                    .unwrap_or(SebulbaError::QueueClosed));
            }
            match self.queue.recv_timeout(Duration::from_millis(20)) {
                Ok(h) => return Ok(h),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(SebulbaError::QueueClosed),
            }
        }
    }

    fn fingerprints(&self, cores: &[LearnerCore]) -> Result<Vec<u64>, SebulbaError> {
        let mut pending = Vec::with_capacity(cores.len());
        for lc in cores {
            pending.push(self.mesh.submit(lc.core, "learn", &[&lc.params], |inp| {
                let h = fingerprint(inp[0].as_f32()?);
                Ok(vec![HostTensor::u32(vec![2], vec![h as u32, (h >> 32) as u32])?])
            })?);
        }
        let mut out = Vec::with_capacity(cores.len());
        for p in pending {
            let w = self.mesh.get(&p.wait()?[0])?.into_u32()?;
            out.push(u64::from(w[0]) | (u64::from(w[1]) << 32));
        }
        Ok(out)
    }

    /// One update per time slice of the dequeued trajectory.
    fn apply_updates(
        &self,
        cores: &mut [LearnerCore],
        handle: &TrajectoryHandle,
        layout: &Arc<ParamLayout>,
        step_count: &mut u64,
    ) -> Result<(), SebulbaError> {
        let pieces = self.config.split_updates;
        for piece in 0..pieces {
            let mut pending = Vec::with_capacity(cores.len());
            for (lc, shard) in cores.iter().zip(&handle.shards) {
                let mut inputs: Vec<&DeviceBuffer> = vec![&lc.params];
                inputs.extend(shard.iter());
                let layout = Arc::clone(layout);
                let agent = self.agent.clone();
                pending.push(self.mesh.submit(lc.core, "learn", &inputs, move |inp| {
                    let params = Params::from_host(layout, &inp[0])?;
                    let shard = Trajectory::from_host_tensors(&inp[1..])?;
                    let slice = if pieces == 1 {
                        shard
                    } else {
                        shard.split_time(pieces)?.swap_remove(piece)
                    };
                    let (grads, _) = agent_gradients(&params, &slice, &agent)?;
                    Ok(vec![grads.to_host()])
                })?);
            }
            let mut grads = Vec::with_capacity(cores.len());
            for p in pending {
                grads.push(p.wait()?.remove(0));
            }
            let mean = self.mesh.all_reduce_mean(&self.global, &grads)?;
            drop(grads);
            let mut pending = Vec::with_capacity(cores.len());
            for (lc, g) in cores.iter().zip(&mean) {
                let layout = Arc::clone(layout);
                let (lr, momentum, step) = (self.agent.learning_rate, self.agent.momentum, *step_count);
                pending.push(self.mesh.submit(lc.core, "learn", &[&lc.params, &lc.opt, g], move |inp| {
                    let params = Params::from_host(Arc::clone(&layout), &inp[0])?;
                    let grads = Params::from_host(layout, &inp[2])?;
                    let state = OptimizerState {
                        step_count: step,
                        momentum,
                        velocity: inp[1].as_f32()?.to_vec(),
                    };
                    let (p, s) = sgd_update(&params, &grads, &state, lr)?;
                    Ok(vec![p.to_host(), HostTensor::vector(s.velocity)])
                })?);
            }
            for (lc, p) in cores.iter_mut().zip(pending) {
                let mut out = p.wait()?.into_iter();
                lc.params = out.next().unwrap();
                lc.opt = out.next().unwrap();
            }
            *step_count += 1;
        }
        Ok(())
    }

    fn train(&self) -> Result<ReplicaReport, SebulbaError> {
        let layout = Arc::clone(self.params.layout());
        let mut cores = Vec::with_capacity(self.learners.len());
        for &core in &self.learners {
            cores.push(LearnerCore {
                core,
                params: self.mesh.put(core, self.params.to_host())?,
                opt: self.mesh.put(core, HostTensor::vector(vec![0.0; layout.total()]))?,
            });
        }
        let mut archive = self.archive.then(|| SebulbaArchive {
            trajectories: Vec::new(),
            params: vec![self.params.clone()],
        });
        let num_updates = self.config.num_updates();
        let mut log = Vec::new();
        let mut lag_histogram = BTreeMap::new();
        let mut max_occupancy = 0;
        let mut step_count = 0u64;
        let mut window = (Instant::now(), 0u64, 0u64, 0u64);
        for update in 0..num_updates {
            let handle = self.next_handle()?;
            let occupancy = self.queue.len() + 1;
            max_occupancy = max_occupancy.max(occupancy);
            if self.config.learner_delay_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.config.learner_delay_ms));
            }
            let lag = update - handle.oldest_version();
            *lag_histogram.entry(lag).or_insert(0) += 1;
            window.2 += lag;
            window.3 += 1;
            if let Some(a) = archive.as_mut() {
                a.trajectories.push(ArchivedTrajectory {
                    actor: handle.actor,
                    actor_side: handle.archive.clone().expect("actors archive when the learner does"),
                    learner_side: fetch_shards(&self.mesh, &handle.shards)?,
                    versions: handle.versions.clone(),
                    consumed_at: update,
                });
            }
            self.apply_updates(&mut cores, &handle, &layout, &mut step_count)?;
            drop(handle);
            let version = update + 1;

            let fps = self.fingerprints(&cores)?;
            if fps.iter().any(|&f| f != fps[0]) {
                return Err(SebulbaError::Desync {
                    update: version,
                    fingerprints: fps,
                });
            }
            for (slot, actor_core) in self.slots.iter().zip(self.actor_cores()) {
                let params = self.mesh.device_transfer(&cores[0].params, actor_core)?;
                slot.store(Arc::new(ParamVersion { version, params }));
            }
            // Hand the credit back only after the new version is visible.
            let _ = self.credits.send(());
            if let Some(a) = archive.as_mut() {
                let host = self.mesh.get(&cores[0].params)?;
                a.params.push(Params::from_host(Arc::clone(&layout), &host).map_err(crate::agent::AgentError::from)?);
            }

            if version % self.config.log_interval == 0 || version == num_updates {
                let now = Instant::now();
                let frames = (version - window.1) * self.config.frames_per_update();
                log.push(SebulbaLogRow {
                    update: version,
                    frames: version * self.config.frames_per_update(),
                    mean_return: self.shared.take_returns().unwrap_or(f32::NAN),
                    frames_per_sec: frames as f64 / (now - window.0).as_secs_f64().max(1e-9),
                    queue_occupancy: self.queue.len(),
                    mean_param_lag: window.2 as f64 / window.3.max(1) as f64,
                });
                window = (now, version, 0, 0);
            }
        }
        let final_params = Params::from_host(Arc::clone(&layout), &self.mesh.get(&cores[0].params)?)
            .map_err(crate::agent::AgentError::from)?;
        Ok(ReplicaReport {
            final_params,
            log,
            updates: num_updates,
            lag_histogram,
            max_occupancy,
            credit_waits: 0,
            produced: 0,
            consumed: num_updates,
            discarded: 0,
            archive,
        })
    }

    fn actor_cores(&self) -> Vec<CoreId> {
        let base = self.replica * self.mesh.config().cores_per_host;
        (base..base + self.config.actor_cores).map(CoreId).collect()
    }
}
