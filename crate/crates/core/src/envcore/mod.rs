//! The Catch environment in two forms: pure functions over explicit state for
//! on-core execution, and a host-side batched environment stepped on a shared
//! worker pool.

mod batched;
pub mod catch;
mod trajectory;

pub use batched::{batched_env_create, sub_env_key, BatchStep, BatchedEnv, WorkerPool};
pub use catch::{
    catch_initial_state, catch_step, catch_transition, decode_observation, env_observe, CatchEnv, CatchState,
    TimeStep, NUM_ACTIONS, OBS_DIM,
};
pub use trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("action {0} is not one of 0 (left), 1 (stay), 2 (right)")]
    InvalidAction(u32),
    #[error("invalid environment state {0}")]
    InvalidState(String),
    #[error("expected {expected} actions, got {found}")]
    BatchSize { expected: usize, found: usize },
    #[error("environment configuration: {0}")]
    Config(String),
    #[error("trajectory: {0}")]
    Trajectory(String),
}
