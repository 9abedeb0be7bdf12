//! Podracer-style reinforcement-learning runtimes on a simulated accelerator
//! mesh.
//!
//! - [`meshsim`]: cores with private memory, explicit transfers, collectives.
//! - [`numerics`]: a small policy/value MLP with a hand-written backward pass.
//! - [`envcore`]: the Catch environment, pure and batched.
//! - [`agent`]: action selection and the importance-weighted actor-critic update.
//! - [`anakin`]: the fused on-core runtime.
//! - [`sebulba`]: the decomposed actor/learner runtime.

pub mod meshsim;
pub mod rng;
pub mod numerics;
pub mod envcore;
pub mod agent;
pub mod anakin;
pub mod sebulba;
