//! Anakin: acting, environment stepping and gradient computation fused into
//! one program per simulated core, replicated over a core group.
//!
//! Device-resident state per core:
//!
//! | buffer   | dtype | shape                  | contents                               |
//! |----------|-------|------------------------|----------------------------------------|
//! | `params` | f32   | `[P]`                  | network parameters                     |
//! | `opt`    | f32   | `[P]`                  | optimizer velocity                     |
//! | `envs`   | u32   | `[B, ENV_WORDS]`       | Catch state words then acting key      |
//! | `stats`  | f32   | `[B + STAT_SLOTS]`     | running returns then cumulative stats  |
//!
//! Only initialization moves data host to device. Metrics and parameter
//! fingerprints come back every `log_interval` updates.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{gradients_from_cache, select_actions_cached, AgentConfig, AgentError, AgentMetrics};
use crate::envcore::catch::{catch_initial_state, catch_transition, observe_into, CatchState, STATE_WORDS};
use crate::envcore::{sub_env_key, Trajectory, NUM_ACTIONS, OBS_DIM};
use crate::meshsim::{CoreGroup, CoreId, DeviceBuffer, HostTensor, Mesh, MeshError, TransferStats};
use crate::numerics::{
    forward_cached, mlp_init, sgd_update, ForwardCache, Grads, MlpDims, OptimizerState, ParamLayout, Params,
};
use crate::rng::RngKey;

/// u32 words per environment on device: Catch state plus a 4-word acting key.
pub const ENV_WORDS: usize = STATE_WORDS + 4;
/// Trailing stat slots: cumulative return sum, completed episodes, last loss,
/// last entropy.
pub const STAT_SLOTS: usize = 4;

const ACT_STREAM: u64 = 0x4143_5400;
const PARAM_STREAM: u64 = 0x5041_5200;

#[derive(Debug, thiserror::Error)]
pub enum AnakinError {
    #[error("invalid anakin configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("parameter copies diverged at update {update}: fingerprints {fingerprints:?}")]
    Desync { update: u64, fingerprints: Vec<u64> },
}

fn default_log_interval() -> u64 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnakinConfig {
    pub num_cores: usize,
    pub batch_per_core: usize,
    pub unroll_length: usize,
    pub total_steps: u64,
    /// Set by whoever launches the run rather than read from a config block.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
}

impl AnakinConfig {
    pub fn validate(&self) -> Result<(), AnakinError> {
        let bad = |m: &str| Err(AnakinError::Config(m.to_string()));
        if self.num_cores == 0 {
            return bad("num_cores must be positive");
        }
        if self.batch_per_core == 0 {
            return bad("batch_per_core must be positive");
        }
        if self.unroll_length == 0 {
            return bad("unroll_length must be positive");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive");
        }
        Ok(())
    }

    /// Environment steps consumed by one update across all cores.
    pub fn steps_per_update(&self) -> u64 {
        (self.num_cores * self.batch_per_core * self.unroll_length) as u64
    }

    pub fn num_updates(&self) -> u64 {
        self.total_steps.div_ceil(self.steps_per_update())
    }
}

/// One environment as carried between units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSlot {
    pub state: CatchState,
    pub act_key: RngKey,
    pub episode_return: f32,
}

impl EnvSlot {
    /// Slot for global environment `index`; the index alone decides its keys,
    /// so the same environment appears regardless of how envs map to cores.
    pub fn new(seed: u64, index: usize) -> Self {
        EnvSlot {
            state: catch_initial_state(sub_env_key(seed, index)),
            act_key: RngKey::from_seed(seed).fold_in(ACT_STREAM).fold_in(index as u64),
            episode_return: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnitOutput {
    pub grads: Grads,
    pub metrics: AgentMetrics,
    pub completed_return: f32,
    pub completed_episodes: u32,
}

/// `T` steps of acting and environment stepping over the slots, then the
/// gradient of the loss on the collected trajectory. Activations from acting
/// are reused by the backward pass.
pub fn anakin_unit(
    params: &Params,
    envs: &mut [EnvSlot],
    unroll_length: usize,
    agent: &AgentConfig,
) -> Result<UnitOutput, AgentError> {
    let b = envs.len();
    let mut traj = Trajectory::empty(unroll_length, b, OBS_DIM, NUM_ACTIONS);
    let mut caches = Vec::with_capacity(unroll_length);
    let mut obs = vec![0.0; b * OBS_DIM];
    let mut keys = Vec::with_capacity(b);
    let mut completed_return = 0.0;
    let mut completed_episodes = 0;
    for t in 0..unroll_length {
        keys.clear();
        for (slot, o) in envs.iter_mut().zip(obs.chunks_mut(OBS_DIM)) {
            observe_into(&slot.state, o);
            let (use_key, next) = slot.act_key.split();
            slot.act_key = next;
            keys.push(use_key);
        }
        let (actions, cache) = select_actions_cached(params, &obs, &keys)?;
        let row = t * b;
        traj.observations[row * OBS_DIM..(row + b) * OBS_DIM].copy_from_slice(&obs);
        traj.behavior_logits[row * NUM_ACTIONS..(row + b) * NUM_ACTIONS].copy_from_slice(&cache.logits);
        traj.actions[row..row + b].copy_from_slice(&actions);
        for (i, slot) in envs.iter_mut().enumerate() {
            let (next, reward, done) =
                catch_transition(&slot.state, actions[i]).map_err(|e| AgentError::Shape(e.to_string()))?;
            slot.state = next;
            slot.episode_return += reward;
            if done {
                completed_return += slot.episode_return;
                completed_episodes += 1;
                slot.episode_return = 0.0;
            }
            traj.rewards[row + i] = reward;
            traj.dones[row + i] = done;
        }
        caches.push(cache);
    }
    for (slot, o) in envs.iter().zip(traj.bootstrap_observation.chunks_mut(OBS_DIM)) {
        observe_into(&slot.state, o);
    }
    let boot = forward_cached(params, &traj.bootstrap_observation, b)?;
    let cache = ForwardCache::concat(&caches);
    let (grads, metrics) = gradients_from_cache(params, &traj, &cache, &boot.values, agent)?;
    Ok(UnitOutput {
        grads,
        metrics,
        completed_return,
        completed_episodes,
    })
}

fn encode_envs(slots: &[EnvSlot]) -> HostTensor {
    let mut words = Vec::with_capacity(slots.len() * ENV_WORDS);
    for s in slots {
        words.extend_from_slice(&s.state.to_words());
        words.extend_from_slice(&s.act_key.words());
    }
    HostTensor::u32(vec![slots.len(), ENV_WORDS], words).expect("env words match shape")
}

fn decode_envs(words: &[u32], returns: &[f32]) -> Vec<EnvSlot> {
    words
        .chunks(ENV_WORDS)
        .zip(returns)
        .map(|(w, &r)| EnvSlot {
            state: CatchState::from_words(&w[..STATE_WORDS]),
            act_key: RngKey::from_words(w[STATE_WORDS..].try_into().unwrap()),
            episode_return: r,
        })
        .collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnakinLogRow {
    pub update: u64,
    pub env_steps: u64,
    /// Mean return of episodes finished since the previous row; NaN if none.
    pub mean_return: f32,
    pub loss: f32,
    pub steps_per_sec: f64,
}

pub const ANAKIN_CSV_HEADER: &str = "update,env_steps,mean_return,loss,steps_per_sec";

impl AnakinLogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.1}",
            self.update, self.env_steps, self.mean_return, self.loss, self.steps_per_sec
        )
    }
}

struct CoreState {
    core: CoreId,
    params: DeviceBuffer,
    opt: DeviceBuffer,
    envs: DeviceBuffer,
    stats: DeviceBuffer,
}

/// A training run in progress, advanced one update at a time.
pub struct AnakinRun {
    mesh: Mesh,
    config: AnakinConfig,
    agent: AgentConfig,
    layout: Arc<ParamLayout>,
    group: CoreGroup,
    cores: Vec<CoreState>,
    updates: u64,
    init_stats: TransferStats,
    log: Vec<AnakinLogRow>,
    last_log: (u64, f64, f64, Instant),
}

impl AnakinRun {
    pub fn new(mesh: &Mesh, config: AnakinConfig, agent: AgentConfig) -> Result<Self, AnakinError> {
        config.validate()?;
        agent.validate()?;
        if config.num_cores > mesh.num_cores() {
            return Err(AnakinError::Config(format!(
                "num_cores {} exceeds the mesh size {}",
                config.num_cores,
                mesh.num_cores()
            )));
        }
        let dims = MlpDims {
            obs_dim: OBS_DIM,
            hidden_dim: agent.hidden_dim,
            num_actions: NUM_ACTIONS,
        };
        let params = mlp_init(RngKey::from_seed(config.seed).fold_in(PARAM_STREAM), dims)
            .map_err(AgentError::from)?;
        let layout = Arc::clone(params.layout());
        let group = CoreGroup::range(0, config.num_cores)?;
        let b = config.batch_per_core;
        let mut cores = Vec::with_capacity(config.num_cores);
        for c in 0..config.num_cores {
            let core = CoreId(c);
            let slots: Vec<EnvSlot> = (c * b..(c + 1) * b).map(|g| EnvSlot::new(config.seed, g)).collect();
            cores.push(CoreState {
                core,
                params: mesh.put(core, params.to_host())?,
                opt: mesh.put(core, HostTensor::vector(vec![0.0; layout.total()]))?,
                envs: mesh.put(core, encode_envs(&slots))?,
                stats: mesh.put(core, HostTensor::vector(vec![0.0; b + STAT_SLOTS]))?,
            });
        }
        Ok(AnakinRun {
            mesh: mesh.clone(),
            config,
            agent,
            layout,
            group,
            cores,
            updates: 0,
            init_stats: mesh.stats(),
            log: Vec::new(),
            last_log: (0, 0.0, 0.0, Instant::now()),
        })
    }

    pub fn config(&self) -> &AnakinConfig {
        &self.config
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn env_steps(&self) -> u64 {
        self.updates * self.config.steps_per_update()
    }

    /// Transfer counters at the end of initialization.
    pub fn init_stats(&self) -> &TransferStats {
        &self.init_stats
    }

    pub fn log(&self) -> &[AnakinLogRow] {
        &self.log
    }

    /// One replicated unit, gradient all-reduce and optimizer step.
    pub fn step(&mut self) -> Result<(), AnakinError> {
        let mut pending = Vec::with_capacity(self.cores.len());
        for cs in &self.cores {
            let layout = Arc::clone(&self.layout);
            let agent = self.agent.clone();
            let t = self.config.unroll_length;
            let b = self.config.batch_per_core;
            let run = self.mesh.submit(
                cs.core,
                "anakin_unit",
                &[&cs.params, &cs.envs, &cs.stats],
                move |inputs| {
                    let params = Params::from_host(layout, &inputs[0])?;
                    let mut stats = inputs[2].as_f32()?.to_vec();
                    let mut slots = decode_envs(inputs[1].as_u32()?, &stats[..b]);
                    let out = anakin_unit(&params, &mut slots, t, &agent)?;
                    for (r, s) in stats.iter_mut().zip(&slots) {
                        *r = s.episode_return;
                    }
                    stats[b] += out.completed_return;
                    stats[b + 1] += out.completed_episodes as f32;
                    stats[b + 2] = out.metrics.loss;
                    stats[b + 3] = out.metrics.entropy;
                    Ok(vec![out.grads.to_host(), encode_envs(&slots), HostTensor::vector(stats)])
                },
            )?;
            pending.push(run);
        }
        let mut grads = Vec::with_capacity(self.cores.len());
        for (cs, run) in self.cores.iter_mut().zip(pending) {
            let mut out = run.wait()?.into_iter();
            grads.push(out.next().unwrap());
            cs.envs = out.next().unwrap();
            cs.stats = out.next().unwrap();
        }
        let mean = self.mesh.all_reduce_mean(&self.group, &grads)?;
        drop(grads);
        let mut pending = Vec::with_capacity(self.cores.len());
        for (cs, g) in self.cores.iter().zip(&mean) {
            let layout = Arc::clone(&self.layout);
            let (lr, momentum, step_count) = (self.agent.learning_rate, self.agent.momentum, self.updates);
            let run = self
                .mesh
                .submit(cs.core, "sgd", &[&cs.params, &cs.opt, g], move |inputs| {
                    let params = Params::from_host(Arc::clone(&layout), &inputs[0])?;
                    let grads = Params::from_host(layout, &inputs[2])?;
                    let state = OptimizerState {
                        step_count,
                        momentum,
                        velocity: inputs[1].as_f32()?.to_vec(),
                    };
                    let (p, s) = sgd_update(&params, &grads, &state, lr)?;
                    Ok(vec![p.to_host(), HostTensor::vector(s.velocity)])
                })?;
            pending.push(run);
        }
        for (cs, run) in self.cores.iter_mut().zip(pending) {
            let mut out = run.wait()?.into_iter();
            cs.params = out.next().unwrap();
            cs.opt = out.next().unwrap();
        }
        self.updates += 1;
        if self.updates % self.config.log_interval == 0 || self.updates == self.config.num_updates() {
            self.record_log()?;
        }
        Ok(())
    }

    /// Fingerprint of every core's params, computed on the cores.
    pub fn param_fingerprints(&self) -> Result<Vec<u64>, AnakinError> {
        let mut pending = Vec::with_capacity(self.cores.len());
        for cs in &self.cores {
            pending.push(self.mesh.submit(cs.core, "fingerprint", &[&cs.params], |inputs| {
                let h = crate::numerics::fingerprint(inputs[0].as_f32()?);
                Ok(vec![HostTensor::u32(vec![2], vec![h as u32, (h >> 32) as u32])?])
            })?);
        }
        let mut out = Vec::with_capacity(pending.len());
        for run in pending {
            let buf = run.wait()?.remove(0);
            let w = self.mesh.get(&buf)?.into_u32()?;
            out.push(u64::from(w[0]) | (u64::from(w[1]) << 32));
        }
        Ok(out)
    }

    fn record_log(&mut self) -> Result<(), AnakinError> {
        let fps = self.param_fingerprints()?;
        if fps.iter().any(|&f| f != fps[0]) {
            return Err(AnakinError::Desync {
                update: self.updates,
                fingerprints: fps,
            });
        }
        let b = self.config.batch_per_core;
        let (mut ret, mut eps, mut loss) = (0.0f64, 0.0f64, 0.0f64);
        for cs in &self.cores {
            let s = self.mesh.get(&cs.stats)?.into_f32()?;
            ret += f64::from(s[b]);
            eps += f64::from(s[b + 1]);
            loss += f64::from(s[b + 2]);
        }
        let (prev_update, prev_ret, prev_eps, prev_time) = self.last_log;
        let now = Instant::now();
        let steps = (self.updates - prev_update) * self.config.steps_per_update();
        let elapsed = (now - prev_time).as_secs_f64().max(1e-9);
        let mean_return = if eps > prev_eps {
            ((ret - prev_ret) / (eps - prev_eps)) as f32
        } else {
            f32::NAN
        };
        self.log.push(AnakinLogRow {
            update: self.updates,
            env_steps: self.env_steps(),
            mean_return,
            loss: (loss / self.cores.len() as f64) as f32,
            steps_per_sec: steps as f64 / elapsed,
        });
        // Exclude the logging transfers from the next window's timing.
        self.last_log = (self.updates, ret, eps, Instant::now());
        Ok(())
    }

    /// Parameters resident on `core_index` (a device-to-host read).
    pub fn params_on(&self, core_index: usize) -> Result<Params, AnakinError> {
        let cs = &self.cores[core_index];
        let host = self.mesh.get(&cs.params)?;
        Params::from_host(Arc::clone(&self.layout), &host).map_err(|e| AnakinError::Agent(e.into()))
    }

    pub fn finish(self) -> Result<AnakinResult, AnakinError> {
        let params = self.params_on(0)?;
        let stats = self.mesh.stats();
        Ok(AnakinResult {
            params,
            log: self.log,
            transfers_after_init: stats.since(&self.init_stats),
            transfers: stats,
        })
    }
}

#[derive(Debug)]
pub struct AnakinResult {
    pub params: Params,
    pub log: Vec<AnakinLogRow>,
    pub transfers: TransferStats,
    pub transfers_after_init: TransferStats,
}

/// Run `config.num_updates()` updates.
pub fn anakin_train(mesh: &Mesh, config: &AnakinConfig, agent: &AgentConfig) -> Result<AnakinResult, AnakinError> {
    let mut run = AnakinRun::new(mesh, config.clone(), agent.clone())?;
    for _ in 0..config.num_updates() {
        run.step()?;
    }
    run.finish()
}
