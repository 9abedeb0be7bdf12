use podracer::envcore::catch::EPISODE_LENGTH;
use podracer::envcore::{
    batched_env_create, sub_env_key, BatchedEnv, CatchEnv, WorkerPool, NUM_ACTIONS, OBS_DIM,
};
use podracer::rng::RngKey;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The batched facade is B independent scalar environments, whatever
    /// the worker count.
    #[test]
    fn batched_env_equals_scalar_envs(batch in 1usize..24, workers in 1usize..5, seed in any::<u64>()) {
        let mut batched = batched_env_create(batch, seed, workers).unwrap();
        let mut scalars: Vec<CatchEnv> = (0..batch).map(|i| CatchEnv::new(sub_env_key(seed, i))).collect();
        let mut s = RngKey::from_seed(seed ^ 0xabc).stream();
        for _ in 0..3 * EPISODE_LENGTH {
            let actions: Vec<u32> = (0..batch).map(|_| s.below(NUM_ACTIONS as u32)).collect();
            let step = batched.step(&actions).unwrap();
            for (i, env) in scalars.iter_mut().enumerate() {
                let ts = env.step(actions[i]).unwrap();
                prop_assert_eq!(step.rewards[i], ts.reward);
                prop_assert_eq!(step.dones[i], ts.done);
                prop_assert_eq!(step.observations.row(i), ts.observation.as_slice());
            }
        }
    }
}

#[test]
fn every_episode_lasts_the_same_number_of_steps() {
    let mut env = batched_env_create(16, 4, 2).unwrap();
    let mut lengths = vec![0u32; 16];
    let mut s = RngKey::from_seed(1).stream();
    for _ in 0..5 * EPISODE_LENGTH {
        let actions: Vec<u32> = (0..16).map(|_| s.below(3)).collect();
        let step = env.step(&actions).unwrap();
        for (i, &done) in step.dones.iter().enumerate() {
            lengths[i] += 1;
            if done {
                assert_eq!(lengths[i], EPISODE_LENGTH);
                assert!(step.rewards[i] == 1.0 || step.rewards[i] == -1.0);
                lengths[i] = 0;
            } else {
                assert_eq!(step.rewards[i], 0.0);
            }
        }
    }
}

#[test]
fn bad_actions_and_batch_sizes_are_rejected() {
    let mut env = BatchedEnv::with_pool(4, 0, WorkerPool::new(1).unwrap()).unwrap();
    assert!(env.step(&[0, 1, 2]).is_err());
    assert!(env.step(&[0, 1, 2, 3]).is_err());
    assert_eq!(env.observations().shape(), &[4, OBS_DIM]);
    assert!(batched_env_create(0, 0, 1).is_err());
}
