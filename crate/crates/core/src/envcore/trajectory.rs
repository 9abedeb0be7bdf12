use super::EnvError;
use crate::meshsim::HostTensor;
use crate::numerics::checkpoint;

/// Time-major batch of fixed-length experience, `[T, B, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub length: usize,
    pub batch: usize,
    pub obs_dim: usize,
    pub num_actions: usize,
    /// `[T, B, obs_dim]`
    pub observations: Vec<f32>,
    /// `[T, B]`
    pub actions: Vec<u32>,
    /// `[T, B, num_actions]`, recorded when the action was selected.
    pub behavior_logits: Vec<f32>,
    /// `[T, B]`
    pub rewards: Vec<f32>,
    /// `[T, B]`
    pub dones: Vec<bool>,
    /// `[B, obs_dim]`, the observation following the last step.
    pub bootstrap_observation: Vec<f32>,
}

fn bits(v: &[f32]) -> impl Iterator<Item = u32> + '_ {
    v.iter().map(|x| x.to_bits())
}

impl Trajectory {
    pub fn empty(length: usize, batch: usize, obs_dim: usize, num_actions: usize) -> Self {
        let tb = length * batch;
        Trajectory {
            length,
            batch,
            obs_dim,
            num_actions,
            observations: vec![0.0; tb * obs_dim],
            actions: vec![0; tb],
            behavior_logits: vec![0.0; tb * num_actions],
            rewards: vec![0.0; tb],
            dones: vec![false; tb],
            bootstrap_observation: vec![0.0; batch * obs_dim],
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let (t, b) = (self.length, self.batch);
        let ok = t > 0
            && b > 0
            && self.observations.len() == t * b * self.obs_dim
            && self.actions.len() == t * b
            && self.behavior_logits.len() == t * b * self.num_actions
            && self.rewards.len() == t * b
            && self.dones.len() == t * b
            && self.bootstrap_observation.len() == b * self.obs_dim;
        if ok {
            Ok(())
        } else {
            Err(EnvError::Trajectory(format!(
                "inconsistent trajectory fields for T={t}, B={b}"
            )))
        }
    }

    pub fn obs_at(&self, t: usize, b: usize) -> &[f32] {
        let i = (t * self.batch + b) * self.obs_dim;
        &self.observations[i..i + self.obs_dim]
    }

    pub fn logits_at(&self, t: usize, b: usize) -> &[f32] {
        let i = (t * self.batch + b) * self.num_actions;
        &self.behavior_logits[i..i + self.num_actions]
    }

    pub fn bitwise_eq(&self, o: &Trajectory) -> bool {
        self.length == o.length
            && self.batch == o.batch
            && self.obs_dim == o.obs_dim
            && self.num_actions == o.num_actions
            && bits(&self.observations).eq(bits(&o.observations))
            && self.actions == o.actions
            && bits(&self.behavior_logits).eq(bits(&o.behavior_logits))
            && bits(&self.rewards).eq(bits(&o.rewards))
            && self.dones == o.dones
            && bits(&self.bootstrap_observation).eq(bits(&o.bootstrap_observation))
    }

    /// Columns `[start, end)` of the batch dimension.
    pub fn batch_slice(&self, start: usize, end: usize) -> Trajectory {
        let w = end - start;
        let mut out = Trajectory::empty(self.length, w, self.obs_dim, self.num_actions);
        for t in 0..self.length {
            let src = t * self.batch + start;
            let dst = t * w;
            let (od, na) = (self.obs_dim, self.num_actions);
            out.observations[dst * od..(dst + w) * od].copy_from_slice(&self.observations[src * od..(src + w) * od]);
            out.behavior_logits[dst * na..(dst + w) * na]
                .copy_from_slice(&self.behavior_logits[src * na..(src + w) * na]);
            out.actions[dst..dst + w].copy_from_slice(&self.actions[src..src + w]);
            out.rewards[dst..dst + w].copy_from_slice(&self.rewards[src..src + w]);
            out.dones[dst..dst + w].copy_from_slice(&self.dones[src..src + w]);
        }
        out.bootstrap_observation
            .copy_from_slice(&self.bootstrap_observation[start * self.obs_dim..end * self.obs_dim]);
        out
    }

    /// Split along the batch dimension into `pieces` equal shards; shard `i`
    /// holds columns `[i·B/pieces, (i+1)·B/pieces)`.
    pub fn shard(&self, pieces: usize) -> Result<Vec<Trajectory>, EnvError> {
        if pieces == 0 || self.batch % pieces != 0 {
            return Err(EnvError::Trajectory(format!(
                "batch {} is not divisible into {pieces} shards",
                self.batch
            )));
        }
        let w = self.batch / pieces;
        Ok((0..pieces).map(|i| self.batch_slice(i * w, (i + 1) * w)).collect())
    }

    /// Inverse of [`Trajectory::shard`].
    pub fn concat_batch(parts: &[Trajectory]) -> Result<Trajectory, EnvError> {
        let first = parts
            .first()
            .ok_or_else(|| EnvError::Trajectory("no shards to concatenate".into()))?;
        if parts.iter().any(|p| {
            p.length != first.length || p.obs_dim != first.obs_dim || p.num_actions != first.num_actions
        }) {
            return Err(EnvError::Trajectory("shards disagree on T or feature sizes".into()));
        }
        let b: usize = parts.iter().map(|p| p.batch).sum();
        let mut out = Trajectory::empty(first.length, b, first.obs_dim, first.num_actions);
        let (od, na) = (first.obs_dim, first.num_actions);
        let mut col = 0;
        for p in parts {
            let w = p.batch;
            for t in 0..p.length {
                let src = t * w;
                let dst = t * b + col;
                out.observations[dst * od..(dst + w) * od].copy_from_slice(&p.observations[src * od..(src + w) * od]);
                out.behavior_logits[dst * na..(dst + w) * na]
                    .copy_from_slice(&p.behavior_logits[src * na..(src + w) * na]);
                out.actions[dst..dst + w].copy_from_slice(&p.actions[src..src + w]);
                out.rewards[dst..dst + w].copy_from_slice(&p.rewards[src..src + w]);
                out.dones[dst..dst + w].copy_from_slice(&p.dones[src..src + w]);
            }
            out.bootstrap_observation[col * od..(col + w) * od].copy_from_slice(&p.bootstrap_observation);
            col += w;
        }
        Ok(out)
    }

    /// Split along time into `pieces` consecutive chunks. Each chunk
    /// bootstraps from the first observation of the chunk after it.
    pub fn split_time(&self, pieces: usize) -> Result<Vec<Trajectory>, EnvError> {
        if pieces == 0 || self.length % pieces != 0 {
            return Err(EnvError::Trajectory(format!(
                "trajectory length {} is not divisible by {pieces}",
                self.length
            )));
        }
        let len = self.length / pieces;
        let (b, od, na) = (self.batch, self.obs_dim, self.num_actions);
        Ok((0..pieces)
            .map(|i| {
                let (t0, t1) = (i * len, (i + 1) * len);
                let bootstrap = if t1 == self.length {
                    self.bootstrap_observation.clone()
                } else {
                    self.observations[t1 * b * od..(t1 + 1) * b * od].to_vec()
                };
                Trajectory {
                    length: len,
                    batch: b,
                    obs_dim: od,
                    num_actions: na,
                    observations: self.observations[t0 * b * od..t1 * b * od].to_vec(),
                    actions: self.actions[t0 * b..t1 * b].to_vec(),
                    behavior_logits: self.behavior_logits[t0 * b * na..t1 * b * na].to_vec(),
                    rewards: self.rewards[t0 * b..t1 * b].to_vec(),
                    dones: self.dones[t0 * b..t1 * b].to_vec(),
                    bootstrap_observation: bootstrap,
                }
            })
            .collect())
    }

    /// Device layout: observations, actions, behavior logits, rewards, dones
    /// (as 0/1 u32), bootstrap observation.
    pub fn to_host_tensors(&self) -> Vec<HostTensor> {
        let (t, b) = (self.length, self.batch);
        vec![
            HostTensor::f32(vec![t, b, self.obs_dim], self.observations.clone()).unwrap(),
            HostTensor::u32(vec![t, b], self.actions.clone()).unwrap(),
            HostTensor::f32(vec![t, b, self.num_actions], self.behavior_logits.clone()).unwrap(),
            HostTensor::f32(vec![t, b], self.rewards.clone()).unwrap(),
            HostTensor::u32(vec![t, b], self.dones.iter().map(|&d| d as u32).collect()).unwrap(),
            HostTensor::f32(vec![b, self.obs_dim], self.bootstrap_observation.clone()).unwrap(),
        ]
    }

    pub fn from_host_tensors(parts: &[impl AsRef<HostTensor>]) -> Result<Self, EnvError> {
        let bad = |m: &str| EnvError::Trajectory(m.to_string());
        if parts.len() != 6 {
            return Err(bad("expected six trajectory tensors"));
        }
        let obs = parts[0].as_ref();
        let logits = parts[2].as_ref();
        if obs.shape().len() != 3 || logits.shape().len() != 3 {
            return Err(bad("observation and logits tensors must be rank 3"));
        }
        let conv = |e: crate::meshsim::MeshError| EnvError::Trajectory(e.to_string());
        let traj = Trajectory {
            length: obs.shape()[0],
            batch: obs.shape()[1],
            obs_dim: obs.shape()[2],
            num_actions: logits.shape()[2],
            observations: obs.as_f32().map_err(conv)?.to_vec(),
            actions: parts[1].as_ref().as_u32().map_err(conv)?.to_vec(),
            behavior_logits: logits.as_f32().map_err(conv)?.to_vec(),
            rewards: parts[3].as_ref().as_f32().map_err(conv)?.to_vec(),
            dones: parts[4].as_ref().as_u32().map_err(conv)?.iter().map(|&d| d != 0).collect(),
            bootstrap_observation: parts[5].as_ref().as_f32().map_err(conv)?.to_vec(),
        };
        traj.validate()?;
        Ok(traj)
    }

    /// Debug dump in the checkpoint file format. Integer fields are stored as
    /// exact f32 values.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let (t, b) = (self.length, self.batch);
        let actions: Vec<f32> = self.actions.iter().map(|&a| a as f32).collect();
        let dones: Vec<f32> = self.dones.iter().map(|&d| d as u32 as f32).collect();
        checkpoint::encode(&[
            ("observations", &[t, b, self.obs_dim], &self.observations),
            ("actions", &[t, b], &actions),
            ("behavior_logits", &[t, b, self.num_actions], &self.behavior_logits),
            ("rewards", &[t, b], &self.rewards),
            ("dones", &[t, b], &dones),
            ("bootstrap_observation", &[b, self.obs_dim], &self.bootstrap_observation),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngKey;
    use proptest::prelude::*;

    pub(crate) fn random_trajectory(seed: u64, t: usize, b: usize) -> Trajectory {
        let mut s = RngKey::from_seed(seed).stream();
        let mut tr = Trajectory::empty(t, b, 4, 3);
        tr.observations.iter_mut().for_each(|v| *v = s.normal());
        tr.actions.iter_mut().for_each(|v| *v = s.below(3));
        tr.behavior_logits.iter_mut().for_each(|v| *v = s.normal());
        tr.rewards.iter_mut().for_each(|v| *v = s.normal());
        tr.dones.iter_mut().for_each(|v| *v = s.below(4) == 0);
        tr.bootstrap_observation.iter_mut().for_each(|v| *v = s.normal());
        tr
    }

    #[test]
    fn shard_widths() {
        let tr = random_trajectory(1, 5, 6);
        let shards = tr.shard(3).unwrap();
        assert_eq!(shards.len(), 3);
        assert!(shards.iter().all(|s| s.batch == 2 && s.validate().is_ok()));
        assert_eq!(shards[1].obs_at(2, 0), tr.obs_at(2, 2));
        assert!(tr.shard(4).is_err());
    }

    #[test]
    fn time_split_bootstraps_from_next_chunk() {
        let tr = random_trajectory(2, 6, 3);
        let parts = tr.split_time(3).unwrap();
        assert_eq!(parts[0].bootstrap_observation, tr.observations[2 * 3 * 4..3 * 3 * 4].to_vec());
        assert_eq!(parts[2].bootstrap_observation, tr.bootstrap_observation);
        assert!(tr.split_time(4).is_err());
    }

    #[test]
    fn host_tensor_round_trip() {
        let tr = random_trajectory(3, 4, 2);
        let back = Trajectory::from_host_tensors(&tr.to_host_tensors()).unwrap();
        assert!(back.bitwise_eq(&tr));
    }

    #[test]
    fn dump_uses_checkpoint_format() {
        let tr = random_trajectory(4, 2, 2);
        let tensors = checkpoint::decode(&tr.to_checkpoint_bytes()).unwrap();
        assert_eq!(tensors.len(), 6);
        assert_eq!(tensors[1].data, tr.actions.iter().map(|&a| a as f32).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn shard_then_concat_is_identity(seed in any::<u64>(), t in 1usize..6, w in 1usize..4, pieces in 1usize..5) {
            let tr = random_trajectory(seed, t, w * pieces);
            let back = Trajectory::concat_batch(&tr.shard(pieces).unwrap()).unwrap();
            prop_assert!(back.bitwise_eq(&tr));
        }
    }
}
