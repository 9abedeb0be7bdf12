use std::sync::Arc;

use super::catch::{catch_initial_state, catch_transition, observe_into, CatchState, NUM_ACTIONS, OBS_DIM};
use super::EnvError;
use crate::numerics::Tensor;
use crate::rng::RngKey;

/// Native threads shared by every batched environment attached to it.
pub struct WorkerPool {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Arc<Self>, EnvError> {
        if workers == 0 {
            return Err(EnvError::Config("num_workers must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("env-worker-{i}"))
            .build()
            .map_err(|e| EnvError::Config(e.to_string()))?;
        Ok(Arc::new(WorkerPool { pool, workers }))
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

/// Result of stepping every sub-environment once.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStep {
    /// `[B, OBS_DIM]`; for finished episodes this is the next episode's first
    /// observation.
    pub observations: Tensor,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
}

/// `B` Catch instances stepped together. Sub-environment `i` is seeded from
/// `(seed, i)`, so results do not depend on how many workers step them.
pub struct BatchedEnv {
    states: Vec<CatchState>,
    observations: Vec<f32>,
    rewards: Vec<f32>,
    dones: Vec<bool>,
    pool: Arc<WorkerPool>,
}

pub fn sub_env_key(seed: u64, index: usize) -> RngKey {
    RngKey::from_seed(seed).fold_in(index as u64)
}

pub fn batched_env_create(num_envs: usize, seed: u64, num_workers: usize) -> Result<BatchedEnv, EnvError> {
    BatchedEnv::with_pool(num_envs, seed, WorkerPool::new(num_workers)?)
}

impl BatchedEnv {
    pub fn with_pool(num_envs: usize, seed: u64, pool: Arc<WorkerPool>) -> Result<Self, EnvError> {
        let keys: Vec<RngKey> = (0..num_envs).map(|i| sub_env_key(seed, i)).collect();
        Self::from_keys(&keys, pool)
    }

    /// One sub-environment per key.
    pub fn from_keys(keys: &[RngKey], pool: Arc<WorkerPool>) -> Result<Self, EnvError> {
        if keys.is_empty() {
            return Err(EnvError::Config("num_envs must be at least 1".into()));
        }
        let states: Vec<CatchState> = keys.iter().map(|&k| catch_initial_state(k)).collect();
        let mut observations = vec![0.0; states.len() * OBS_DIM];
        for (s, o) in states.iter().zip(observations.chunks_mut(OBS_DIM)) {
            observe_into(s, o);
        }
        let n = states.len();
        Ok(BatchedEnv {
            states,
            observations,
            rewards: vec![0.0; n],
            dones: vec![false; n],
            pool,
        })
    }

    pub fn num_envs(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[CatchState] {
        &self.states
    }

    /// Current observations `[B, OBS_DIM]`.
    pub fn observations(&self) -> Tensor {
        Tensor::new(vec![self.num_envs(), OBS_DIM], self.observations.clone()).unwrap()
    }

    pub fn step(&mut self, actions: &[u32]) -> Result<BatchStep, EnvError> {
        let n = self.num_envs();
        if actions.len() != n {
            return Err(EnvError::BatchSize {
                expected: n,
                found: actions.len(),
            });
        }
        if let Some(&a) = actions.iter().find(|&&a| a as usize >= NUM_ACTIONS) {
            return Err(EnvError::InvalidAction(a));
        }
        // Static block partition: worker w owns a contiguous range of envs.
        let workers = self.pool.workers.min(n);
        let block = n.div_ceil(workers);
        let failure = std::sync::Mutex::new(None);
        let BatchedEnv {
            states,
            observations,
            rewards,
            dones,
            pool,
        } = self;
        pool.pool.scope(|scope| {
            let blocks = states
                .chunks_mut(block)
                .zip(observations.chunks_mut(block * OBS_DIM))
                .zip(rewards.chunks_mut(block))
                .zip(dones.chunks_mut(block))
                .zip(actions.chunks(block));
            for ((((st, obs), rew), done), act) in blocks {
                let failure = &failure;
                scope.spawn(move |_| {
                    for i in 0..st.len() {
                        match catch_transition(&st[i], act[i]) {
                            Ok((next, r, d)) => {
                                st[i] = next;
                                rew[i] = r;
                                done[i] = d;
                                observe_into(&next, &mut obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
                            }
                            Err(e) => {
                                *failure.lock().unwrap() = Some(e);
                                return;
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        Ok(BatchStep {
            observations: self.observations(),
            rewards: self.rewards.clone(),
            dones: self.dones.clone(),
        })
    }
}
