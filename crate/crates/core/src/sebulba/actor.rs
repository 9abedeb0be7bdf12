use std::sync::atomic::Ordering;
use std::sync::Arc;

use crossbeam_channel::{select, Receiver, Sender, TryRecvError};

use super::{ActorId, ParamSlot, ReplicaShared, SebulbaConfig, SebulbaError, TrajectoryHandle};
use crate::agent::select_actions;
use crate::envcore::{BatchedEnv, Trajectory, WorkerPool, NUM_ACTIONS, OBS_DIM};
use crate::meshsim::{program_error, CoreId, DeviceBuffer, HostTensor, Mesh, MeshError, ProgramError};
use crate::numerics::{ParamLayout, Params, Tensor};
use crate::rng::RngKey;

/// Tensors of one trajectory in the order the learner expects them.
pub const SHARD_TENSORS: usize = 6;

/// Device buffers of one acting step on the actor core.
pub struct StepBuffers {
    pub obs: DeviceBuffer,
    pub actions: DeviceBuffer,
    pub logits: DeviceBuffer,
    pub rewards: DeviceBuffer,
    pub dones: DeviceBuffer,
}

/// Inside an actor-core program: stack per-step inputs (five per step, then
/// the bootstrap observation) into a trajectory and cut it into `pieces`
/// shards of six tensors each.
fn assemble_shards(
    inputs: &[Arc<HostTensor>],
    length: usize,
    batch: usize,
    pieces: usize,
) -> Result<Vec<HostTensor>, ProgramError> {
    if inputs.len() != 5 * length + 1 {
        return Err(program_error(format!("expected {} inputs, got {}", 5 * length + 1, inputs.len())));
    }
    let mut traj = Trajectory::empty(length, batch, OBS_DIM, NUM_ACTIONS);
    for (t, step) in inputs.chunks(5).take(length).enumerate() {
        let (o, a) = (t * batch * OBS_DIM, t * batch * NUM_ACTIONS);
        traj.observations[o..o + batch * OBS_DIM].copy_from_slice(step[0].as_f32()?);
        traj.actions[t * batch..(t + 1) * batch].copy_from_slice(step[1].as_u32()?);
        traj.behavior_logits[a..a + batch * NUM_ACTIONS].copy_from_slice(step[2].as_f32()?);
        traj.rewards[t * batch..(t + 1) * batch].copy_from_slice(step[3].as_f32()?);
        for (d, &w) in traj.dones[t * batch..(t + 1) * batch].iter_mut().zip(step[4].as_u32()?) {
            *d = w != 0;
        }
    }
    traj.bootstrap_observation.copy_from_slice(inputs[5 * length].as_f32()?);
    let shards = traj.shard(pieces)?;
    Ok(shards.iter().flat_map(|s| s.to_host_tensors()).collect())
}

/// Shard a trajectory held as per-step buffers on `core` and move shard `i`
/// to `learners[i]` over the device-to-device path.
pub fn ship_steps(
    mesh: &Mesh,
    core: CoreId,
    steps: &[StepBuffers],
    bootstrap: &DeviceBuffer,
    batch: usize,
    learners: &[CoreId],
) -> Result<Vec<Vec<DeviceBuffer>>, MeshError> {
    let mut inputs: Vec<&DeviceBuffer> = Vec::with_capacity(5 * steps.len() + 1);
    for s in steps {
        inputs.extend([&s.obs, &s.actions, &s.logits, &s.rewards, &s.dones]);
    }
    inputs.push(bootstrap);
    let (length, pieces) = (steps.len(), learners.len());
    let local = mesh.run_on_core(core, "act", &inputs, move |inp| assemble_shards(inp, length, batch, pieces))?;
    let mut shards = Vec::with_capacity(pieces);
    for (chunk, &dst) in local.chunks(SHARD_TENSORS).zip(learners) {
        shards.push(
            chunk
                .iter()
                .map(|b| mesh.device_transfer(b, dst))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(shards)
}

/// Place a host trajectory on `core` step by step, then ship it as an actor
/// thread would.
pub fn ship_trajectory(
    mesh: &Mesh,
    core: CoreId,
    traj: &Trajectory,
    learners: &[CoreId],
) -> Result<Vec<Vec<DeviceBuffer>>, SebulbaError> {
    traj.validate()?;
    let b = traj.batch;
    let mut steps = Vec::with_capacity(traj.length);
    for t in 0..traj.length {
        let rows = t * b..(t + 1) * b;
        steps.push(StepBuffers {
            obs: mesh.put(
                core,
                HostTensor::f32(vec![b, OBS_DIM], traj.observations[rows.start * OBS_DIM..rows.end * OBS_DIM].to_vec())?,
            )?,
            actions: mesh.put(core, HostTensor::u32(vec![b], traj.actions[rows.clone()].to_vec())?)?,
            logits: mesh.put(
                core,
                HostTensor::f32(
                    vec![b, NUM_ACTIONS],
                    traj.behavior_logits[rows.start * NUM_ACTIONS..rows.end * NUM_ACTIONS].to_vec(),
                )?,
            )?,
            rewards: mesh.put(core, HostTensor::f32(vec![b], traj.rewards[rows.clone()].to_vec())?)?,
            dones: mesh.put(core, HostTensor::u32(vec![b], traj.dones[rows].iter().map(|&d| d as u32).collect())?)?,
        });
    }
    let boot = mesh.put(core, HostTensor::f32(vec![b, OBS_DIM], traj.bootstrap_observation.clone())?)?;
    Ok(ship_steps(mesh, core, &steps, &boot, b, learners)?)
}

/// Read shards back from the learner cores and concatenate them along batch.
pub fn fetch_shards(mesh: &Mesh, shards: &[Vec<DeviceBuffer>]) -> Result<Trajectory, SebulbaError> {
    let mut parts = Vec::with_capacity(shards.len());
    for shard in shards {
        let host = shard.iter().map(|b| mesh.get(b)).collect::<Result<Vec<_>, _>>()?;
        parts.push(Trajectory::from_host_tensors(&host)?);
    }
    Ok(Trajectory::concat_batch(&parts)?)
}

pub(crate) struct ActorContext {
    pub mesh: Mesh,
    pub id: ActorId,
    pub key: RngKey,
    pub layout: Arc<ParamLayout>,
    pub slot: Arc<ParamSlot>,
    pub pool: Arc<WorkerPool>,
    pub learners: Vec<CoreId>,
    pub config: SebulbaConfig,
    pub queue: Sender<TrajectoryHandle>,
    pub credits: Receiver<()>,
    /// Never carries a message; disconnects when the learner stops.
    pub stop: Receiver<()>,
    pub shared: Arc<ReplicaShared>,
    pub archive: bool,
}

enum Flow {
    Continue,
    Stop,
}

impl ActorContext {
    pub fn run(self) {
        if let Err(e) = self.run_inner() {
            let e = match e {
                SebulbaError::Actor { .. } => e,
                other => SebulbaError::Actor {
                    actor: self.id,
                    message: other.to_string(),
                },
            };
            self.shared.fail(e);
        }
    }

    fn stopped(&self) -> bool {
        matches!(self.stop.try_recv(), Err(TryRecvError::Disconnected))
    }

    fn acquire_credit(&self) -> Flow {
        match self.credits.try_recv() {
            Ok(()) => return Flow::Continue,
            Err(TryRecvError::Disconnected) => return Flow::Stop,
            Err(TryRecvError::Empty) => {}
        }
        self.shared.credit_waits.fetch_add(1, Ordering::Relaxed);
        select! {
            recv(self.credits) -> r => if r.is_ok() { Flow::Continue } else { Flow::Stop },
            recv(self.stop) -> _ => Flow::Stop,
        }
    }

    fn run_inner(&self) -> Result<(), SebulbaError> {
        let (mesh, core) = (&self.mesh, self.id.core);
        let (b, t_len) = (self.config.actor_batch, self.config.trajectory_length);
        let (env_key, act_key) = self.key.split();
        let mut env = BatchedEnv::from_keys(&env_key.split_n(b), Arc::clone(&self.pool))?;
        let first = env.observations();
        let mut obs_host = first.data().to_vec();
        let mut obs_buf = mesh.put(core, first.into())?;
        let mut running = vec![0.0f32; b];
        let mut step_index = 0u64;
        loop {
            if let Flow::Stop = self.acquire_credit() {
                return Ok(());
            }
            let mut steps = Vec::with_capacity(t_len);
            let mut versions = Vec::with_capacity(t_len);
            let mut archive = self.archive.then(|| Trajectory::empty(t_len, b, OBS_DIM, NUM_ACTIONS));
            for t in 0..t_len {
                if self.stopped() {
                    return Ok(());
                }
                // Pick up the newest parameters at every inference step.
                let current = self.slot.load_full();
                let key = act_key.fold_in(step_index);
                step_index += 1;
                let layout = Arc::clone(&self.layout);
                let out = mesh.run_on_core(core, "act", &[&current.params, &obs_buf], move |inp| {
                    let params = Params::from_host(layout, &inp[0])?;
                    let obs = Tensor::try_from(inp[1].as_ref())?;
                    let (actions, logits) = select_actions(&params, &obs, key).map_err(|e| program_error(e.to_string()))?;
                    Ok(vec![HostTensor::u32(vec![actions.len()], actions)?, logits.into()])
                })?;
                let mut out = out.into_iter();
                let (actions_buf, logits_buf) = (out.next().unwrap(), out.next().unwrap());
                let actions = mesh.get(&actions_buf)?.into_u32()?;
                let step = env.step(&actions)?;
                {
                    let mut finished = (0.0f64, 0u64);
                    for i in 0..b {
                        running[i] += step.rewards[i];
                        if step.dones[i] {
                            finished.0 += f64::from(running[i]);
                            finished.1 += 1;
                            running[i] = 0.0;
                        }
                    }
                    if finished.1 > 0 {
                        let mut r = self.shared.returns.lock();
                        r.0 += finished.0;
                        r.1 += finished.1;
                    }
                }
                if let Some(tr) = archive.as_mut() {
                    let rows = t * b..(t + 1) * b;
                    tr.observations[rows.start * OBS_DIM..rows.end * OBS_DIM].copy_from_slice(&obs_host);
                    tr.actions[rows.clone()].copy_from_slice(&actions);
                    tr.behavior_logits[rows.start * NUM_ACTIONS..rows.end * NUM_ACTIONS]
                        .copy_from_slice(mesh.get(&logits_buf)?.as_f32()?);
                    tr.rewards[rows.clone()].copy_from_slice(&step.rewards);
                    tr.dones[rows].copy_from_slice(&step.dones);
                }
                let rewards = mesh.put(core, HostTensor::f32(vec![b], step.rewards)?)?;
                let dones = mesh.put(core, HostTensor::u32(vec![b], step.dones.iter().map(|&d| d as u32).collect())?)?;
                obs_host = step.observations.data().to_vec();
                let next_obs = mesh.put(core, step.observations.into())?;
                steps.push(StepBuffers {
                    obs: std::mem::replace(&mut obs_buf, next_obs),
                    actions: actions_buf,
                    logits: logits_buf,
                    rewards,
                    dones,
                });
                versions.push(current.version);
            }
            if let Some(tr) = archive.as_mut() {
                tr.bootstrap_observation.copy_from_slice(&obs_host);
            }
            let shards = ship_steps(mesh, core, &steps, &obs_buf, b, &self.learners)?;
            drop(steps);
            let handle = TrajectoryHandle {
                shards,
                actor: self.id,
                versions,
                archive,
            };
            select! {
                send(self.queue, handle) -> r => if r.is_err() { return Ok(()) },
                recv(self.stop) -> _ => return Ok(()),
            }
            self.shared.produced.fetch_add(1, Ordering::Relaxed);
            self.shared.note_occupancy(self.queue.len());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshsim::MeshConfig;

    fn random_trajectory(key: RngKey, t: usize, b: usize) -> Trajectory {
        let mut s = key.stream();
        let mut tr = Trajectory::empty(t, b, OBS_DIM, NUM_ACTIONS);
        tr.observations.iter_mut().for_each(|v| *v = s.normal());
        tr.actions.iter_mut().for_each(|v| *v = s.below(3));
        tr.behavior_logits.iter_mut().for_each(|v| *v = s.normal());
        tr.rewards.iter_mut().for_each(|v| *v = s.normal());
        tr.dones.iter_mut().for_each(|v| *v = s.below(4) == 0);
        tr.bootstrap_observation.iter_mut().for_each(|v| *v = s.normal());
        tr
    }

    #[test]
    fn six_envs_over_three_learners() {
        let mesh = Mesh::new(MeshConfig::new(4)).unwrap();
        let tr = random_trajectory(RngKey::from_seed(1), 5, 6);
        let learners = [CoreId(1), CoreId(2), CoreId(3)];
        let shards = ship_trajectory(&mesh, CoreId(0), &tr, &learners).unwrap();
        for (i, s) in shards.iter().enumerate() {
            assert!(s.iter().all(|b| b.owner() == learners[i]));
            assert_eq!(s[0].shape(), &[5, 2, OBS_DIM]);
        }
        assert!(fetch_shards(&mesh, &shards).unwrap().bitwise_eq(&tr));
    }

    #[test]
    fn shipping_moves_only_device_to_device_bytes_to_learners() {
        let mesh = Mesh::new(MeshConfig::new(3)).unwrap();
        let tr = random_trajectory(RngKey::from_seed(2), 4, 4);
        let before = mesh.stats();
        let _shards = ship_trajectory(&mesh, CoreId(0), &tr, &[CoreId(1), CoreId(2)]).unwrap();
        let delta = mesh.stats().since(&before);
        for learner in [1, 2] {
            let c = &delta.cores[&learner];
            assert_eq!((c.h2d_bytes, c.d2h_bytes), (0, 0));
        }
        assert!(delta.cores[&0].d2d_bytes > 0);
    }

    #[test]
    fn ragged_shard_count_is_a_program_error() {
        let mesh = Mesh::new(MeshConfig::new(4)).unwrap();
        let tr = random_trajectory(RngKey::from_seed(3), 2, 4);
        let err = ship_trajectory(&mesh, CoreId(0), &tr, &[CoreId(1), CoreId(2), CoreId(3)]);
        assert!(matches!(err, Err(SebulbaError::Mesh(MeshError::Program { .. }))));
    }
}
