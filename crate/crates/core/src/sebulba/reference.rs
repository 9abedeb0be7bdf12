//! Host-only versions of the learner update and of a fully synchronous
//! single-actor pipeline, used as oracles for the threaded runtime.

use std::sync::Arc;

use super::{actor_key, initial_params, SebulbaConfig, SebulbaError};
use crate::agent::{agent_gradients, select_actions, AgentConfig, AgentMetrics};
use crate::envcore::{BatchedEnv, Trajectory, WorkerPool, NUM_ACTIONS, OBS_DIM};
use crate::meshsim::pairwise_tree_sum;
use crate::numerics::{sgd_update, OptimizerState, Params};

/// Apply `n` sequential updates, the `k`-th one on time slice `k` of every
/// shard, with shard gradients averaged the way the learner group does.
pub fn split_update(
    params: &Params,
    opt_state: &OptimizerState,
    shards: &[Trajectory],
    n: usize,
    agent: &AgentConfig,
) -> Result<(Params, OptimizerState, Vec<AgentMetrics>), SebulbaError> {
    if shards.is_empty() {
        return Err(SebulbaError::Config("split_update needs at least one shard".into()));
    }
    if n == 0 || shards[0].length % n != 0 {
        return Err(SebulbaError::Config(format!(
            "split count {n} does not divide trajectory length {}",
            shards[0].length
        )));
    }
    let sliced = shards
        .iter()
        .map(|s| s.split_time(n))
        .collect::<Result<Vec<_>, _>>()?;
    let (mut p, mut s) = (params.clone(), opt_state.clone());
    let mut metrics = Vec::with_capacity(n);
    for k in 0..n {
        let mut grads = Vec::with_capacity(shards.len());
        for pieces in &sliced {
            let (g, m) = agent_gradients(&p, &pieces[k], agent)?;
            grads.push(g);
            metrics.push(m);
        }
        let slices: Vec<&[f32]> = grads.iter().map(|g| g.values()).collect();
        let mut mean = pairwise_tree_sum(&slices);
        let count = slices.len() as f32;
        mean.iter_mut().for_each(|v| *v /= count);
        let mean = Params::from_values(Arc::clone(p.layout()), mean).map_err(crate::agent::AgentError::from)?;
        (p, s) = sgd_update(&p, &mean, &s, agent.learning_rate).map_err(crate::agent::AgentError::from)?;
    }
    Ok((p, s, metrics))
}

/// The one-actor, one-learner pipeline run in a single thread: collect a
/// trajectory with the latest parameters, update, repeat. Returns the
/// parameter sequence starting with the initial parameters.
pub fn sebulba_reference(
    config: &SebulbaConfig,
    agent: &AgentConfig,
    updates: usize,
) -> Result<Vec<Params>, SebulbaError> {
    let (b, t_len) = (config.actor_batch, config.trajectory_length);
    let (env_key, act_key) = actor_key(config.seed, 0, 0, 0).split();
    let mut env = BatchedEnv::from_keys(&env_key.split_n(b), WorkerPool::new(1)?)?;
    let mut params = initial_params(config.seed, agent)?;
    let mut opt = OptimizerState::new(&params, agent.momentum);
    let mut history = vec![params.clone()];
    let mut step_index = 0u64;
    for _ in 0..updates {
        let mut traj = Trajectory::empty(t_len, b, OBS_DIM, NUM_ACTIONS);
        for t in 0..t_len {
            let obs = env.observations();
            let (actions, logits) = select_actions(&params, &obs, act_key.fold_in(step_index))?;
            step_index += 1;
            let step = env.step(&actions)?;
            let rows = t * b..(t + 1) * b;
            traj.observations[rows.start * OBS_DIM..rows.end * OBS_DIM].copy_from_slice(obs.data());
            traj.actions[rows.clone()].copy_from_slice(&actions);
            traj.behavior_logits[rows.start * NUM_ACTIONS..rows.end * NUM_ACTIONS].copy_from_slice(logits.data());
            traj.rewards[rows.clone()].copy_from_slice(&step.rewards);
            traj.dones[rows].copy_from_slice(&step.dones);
        }
        traj.bootstrap_observation = env.observations().into_data();
        let shards = traj.shard(config.learner_cores)?;
        let (p, s, _) = split_update(&params, &opt, &shards, config.split_updates, agent)?;
        params = p;
        opt = s;
        history.push(params.clone());
    }
    Ok(history)
}
