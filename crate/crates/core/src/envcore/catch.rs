//! Catch on a 10×5 grid as pure functions over an explicit state.
//!
//! A ball starts in row 0 of a random column and falls one row per step. The
//! agent moves a paddle along the bottom row. When the ball reaches row 9 the
//! episode ends with +1 if the paddle is under it and −1 otherwise, and the
//! state is replaced by a fresh initial state drawn from the carried key.

use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::rng::RngKey;

pub const ROWS: u32 = 10;
pub const COLS: u32 = 5;
pub const OBS_DIM: usize = (ROWS * COLS) as usize;
pub const NUM_ACTIONS: usize = 3;
pub const EPISODE_LENGTH: u32 = ROWS - 1;
/// Words per state in [`CatchState::to_words`].
pub const STATE_WORDS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CatchState {
    pub ball_row: u32,
    pub ball_col: u32,
    pub paddle_col: u32,
    pub rng_key: RngKey,
}

impl CatchState {
    pub fn to_words(&self) -> [u32; STATE_WORDS] {
        let k = self.rng_key.words();
        [self.ball_row, self.ball_col, self.paddle_col, k[0], k[1], k[2], k[3]]
    }

    pub fn from_words(w: &[u32]) -> Self {
        CatchState {
            ball_row: w[0],
            ball_col: w[1],
            paddle_col: w[2],
            rng_key: RngKey::from_words([w[3], w[4], w[5], w[6]]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeStep {
    pub observation: Vec<f32>,
    pub reward: f32,
    pub done: bool,
}

pub fn catch_initial_state(key: RngKey) -> CatchState {
    let (k_ball, k_carry) = key.split();
    CatchState {
        ball_row: 0,
        ball_col: k_ball.below(COLS),
        paddle_col: COLS / 2,
        rng_key: k_carry,
    }
}

/// Transition without building an observation.
pub fn catch_transition(state: &CatchState, action: u32) -> Result<(CatchState, f32, bool), EnvError> {
    if action as usize >= NUM_ACTIONS {
        return Err(EnvError::InvalidAction(action));
    }
    if state.ball_row >= EPISODE_LENGTH || state.ball_col >= COLS || state.paddle_col >= COLS {
        return Err(EnvError::InvalidState(format!("{state:?}")));
    }
    let paddle = (state.paddle_col as i64 + action as i64 - 1).clamp(0, COLS as i64 - 1) as u32;
    let row = state.ball_row + 1;
    if row == EPISODE_LENGTH {
        let reward = if paddle == state.ball_col { 1.0 } else { -1.0 };
        Ok((catch_initial_state(state.rng_key), reward, true))
    } else {
        Ok((
            CatchState {
                ball_row: row,
                paddle_col: paddle,
                ..*state
            },
            0.0,
            false,
        ))
    }
}

/// Pure step: 0 = left, 1 = stay, 2 = right.
pub fn catch_step(state: &CatchState, action: u32) -> Result<(CatchState, TimeStep), EnvError> {
    let (next, reward, done) = catch_transition(state, action)?;
    Ok((
        next,
        TimeStep {
            observation: env_observe(&next),
            reward,
            done,
        },
    ))
}

/// Flattened one-hot grid: the ball cell and the paddle cell on the bottom row.
pub fn env_observe(state: &CatchState) -> Vec<f32> {
    let mut obs = vec![0.0; OBS_DIM];
    observe_into(state, &mut obs);
    obs
}

pub fn observe_into(state: &CatchState, out: &mut [f32]) {
    out.fill(0.0);
    out[(state.ball_row * COLS + state.ball_col) as usize] = 1.0;
    out[((ROWS - 1) * COLS + state.paddle_col) as usize] = 1.0;
}

/// Recover `(ball_row, ball_col, paddle_col)` from an observation.
pub fn decode_observation(obs: &[f32]) -> Option<(u32, u32, u32)> {
    if obs.len() != OBS_DIM || obs.iter().any(|&v| v != 0.0 && v != 1.0) {
        return None;
    }
    let bottom = ((ROWS - 1) * COLS) as usize;
    let paddle = obs[bottom..].iter().position(|&v| v == 1.0)? as u32;
    match obs[..bottom].iter().position(|&v| v == 1.0) {
        Some(i) => Some((i as u32 / COLS, i as u32 % COLS, paddle)),
        // Ball on the bottom row, sharing the paddle cell.
        None => Some((ROWS - 1, paddle, paddle)),
    }
}

/// Host-side stateful wrapper around the pure functions.
#[derive(Clone, Debug)]
pub struct CatchEnv {
    state: CatchState,
}

impl CatchEnv {
    pub fn new(key: RngKey) -> Self {
        CatchEnv {
            state: catch_initial_state(key),
        }
    }

    pub fn state(&self) -> &CatchState {
        &self.state
    }

    pub fn observation(&self) -> Vec<f32> {
        env_observe(&self.state)
    }

    pub fn step(&mut self, action: u32) -> Result<TimeStep, EnvError> {
        let (next, ts) = catch_step(&self.state, action)?;
        self.state = next;
        Ok(ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi_square_p(counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        let e = n as f64 / counts.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn initial_state_construction() {
        let root = RngKey::from_seed(0);
        for i in 0..100 {
            let s = catch_initial_state(root.fold_in(i));
            assert_eq!(s.ball_row, 0);
            assert_eq!(s.paddle_col, 2);
            assert!(s.ball_col < COLS);
            assert_eq!(s, catch_initial_state(root.fold_in(i)));
        }
    }

    #[test]
    fn initial_column_is_uniform() {
        let root = RngKey::from_seed(123);
        let mut counts = [0usize; COLS as usize];
        for i in 0..10_000 {
            counts[catch_initial_state(root.fold_in(i)).ball_col as usize] += 1;
        }
        assert!(chi_square_p(&counts) > 0.01, "{counts:?}");
    }

    #[test]
    fn paddle_clamps_at_edges() {
        let s = CatchState {
            ball_row: 0,
            ball_col: 3,
            paddle_col: 0,
            rng_key: RngKey::from_seed(0),
        };
        let (n, _) = catch_step(&s, 0).unwrap();
        assert_eq!(n.paddle_col, 0);
        let s = CatchState { paddle_col: 4, ..s };
        let (n, _) = catch_step(&s, 2).unwrap();
        assert_eq!(n.paddle_col, 4);
    }

    #[test]
    fn catch_and_miss_at_the_bottom() {
        let key = RngKey::from_seed(1);
        let s = CatchState {
            ball_row: 8,
            ball_col: 2,
            paddle_col: 2,
            rng_key: key,
        };
        let (n, ts) = catch_step(&s, 1).unwrap();
        assert!(ts.done);
        assert_eq!(ts.reward, 1.0);
        assert_eq!(n, catch_initial_state(key));
        assert_eq!(ts.observation, env_observe(&n));
        let (_, ts) = catch_step(&s, 0).unwrap();
        assert_eq!(ts.reward, -1.0);
    }

    #[test]
    fn invalid_action_rejected() {
        let s = catch_initial_state(RngKey::from_seed(0));
        assert_eq!(catch_step(&s, 3).unwrap_err(), EnvError::InvalidAction(3));
    }

    #[test]
    fn step_is_pure() {
        let s = catch_initial_state(RngKey::from_seed(9));
        let a = catch_step(&s, 2).unwrap();
        let b = catch_step(&s, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn episodes_last_nine_steps_with_sparse_reward() {
        let mut env = CatchEnv::new(RngKey::from_seed(2));
        let mut acts = RngKey::from_seed(3).stream();
        let mut len = 0;
        let mut episodes = 0;
        for _ in 0..9 * 200 {
            let ts = env.step(acts.below(3)).unwrap();
            len += 1;
            assert!([-1.0, 0.0, 1.0].contains(&ts.reward));
            assert_eq!(ts.reward != 0.0, ts.done);
            // Auto-reset: never hand back a grid with the ball on the bottom row.
            assert!(decode_observation(&ts.observation).unwrap().0 < EPISODE_LENGTH);
            if ts.done {
                assert_eq!(len, 9);
                len = 0;
                episodes += 1;
            }
        }
        assert_eq!(episodes, 200);
    }

    #[test]
    fn random_policy_return_monte_carlo() {
        let mut env = CatchEnv::new(RngKey::from_seed(77));
        let mut acts = RngKey::from_seed(78).stream();
        let (mut total, mut episodes) = (0.0f64, 0);
        while episodes < 10_000 {
            let ts = env.step(acts.below(3)).unwrap();
            if ts.done {
                total += ts.reward as f64;
                episodes += 1;
            }
        }
        let mean = total / episodes as f64;
        // Uniform random actions: the paddle performs a lazy random walk, so
        // the catch rate is measured rather than assumed to be 1/5.
        assert!((mean - -0.6).abs() < 0.05, "mean return {mean}");
    }

    #[test]
    fn observation_has_ball_and_paddle() {
        let mut s = catch_initial_state(RngKey::from_seed(4));
        let o = env_observe(&s);
        assert_eq!(o.iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(o, env_observe(&s));
        s.ball_row = 9;
        s.ball_col = s.paddle_col;
        let o = env_observe(&s);
        assert_eq!(o.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(decode_observation(&o), Some((9, s.paddle_col, s.paddle_col)));
    }

    #[test]
    fn observation_inverts_to_state_fields() {
        let key = RngKey::from_seed(0);
        for row in 0..9 {
            for col in 0..COLS {
                for paddle in 0..COLS {
                    let s = CatchState {
                        ball_row: row,
                        ball_col: col,
                        paddle_col: paddle,
                        rng_key: key,
                    };
                    assert_eq!(decode_observation(&env_observe(&s)), Some((row, col, paddle)));
                }
            }
        }
    }

    #[test]
    fn words_round_trip() {
        let s = catch_initial_state(RngKey::from_seed(31));
        assert_eq!(CatchState::from_words(&s.to_words()), s);
    }
}
