//! Cross-module checks on the two runtimes.

use podracer::agent::AgentConfig;
use podracer::anakin::{anakin_train, AnakinConfig};
use podracer::meshsim::{Mesh, MeshConfig};
use podracer::numerics::Params;
use podracer::sebulba::{sebulba_train, SebulbaConfig};

fn agent() -> AgentConfig {
    AgentConfig {
        learning_rate: 0.02,
        momentum: 0.9,
        entropy_cost: 0.1,
        ..AgentConfig::default()
    }
}

fn mesh(cores: usize, per_host: usize) -> Mesh {
    let mut c = MeshConfig::new(cores);
    c.cores_per_host = per_host;
    Mesh::new(c).unwrap()
}

#[test]
fn anakin_checkpoint_round_trips() {
    let cfg = AnakinConfig {
        num_cores: 2,
        batch_per_core: 3,
        unroll_length: 5,
        total_steps: 3000,
        seed: 8,
        log_interval: 25,
    };
    let res = anakin_train(&mesh(2, 8), &cfg, &agent()).unwrap();
    let bytes = res.params.to_checkpoint_bytes();
    let back = Params::from_checkpoint_bytes(&bytes).unwrap();
    assert!(back.bitwise_eq(&res.params));
    assert_eq!(back.to_checkpoint_bytes(), bytes);
}

#[test]
fn anakin_runs_differ_by_seed_only() {
    let cfg = |seed| AnakinConfig {
        num_cores: 2,
        batch_per_core: 2,
        unroll_length: 4,
        total_steps: 1600,
        seed,
        log_interval: 50,
    };
    let a = anakin_train(&mesh(2, 8), &cfg(1), &agent()).unwrap();
    let b = anakin_train(&mesh(2, 8), &cfg(1), &agent()).unwrap();
    let c = anakin_train(&mesh(2, 8), &cfg(2), &agent()).unwrap();
    assert!(a.params.bitwise_eq(&b.params));
    assert!(!a.params.bitwise_eq(&c.params));
}

#[test]
fn anakin_improves_catch_returns() {
    let cfg = AnakinConfig {
        num_cores: 4,
        batch_per_core: 2,
        unroll_length: 16,
        total_steps: 1_000_000,
        seed: 0,
        log_interval: 100,
    };
    let res = anakin_train(&mesh(4, 8), &cfg, &agent()).unwrap();
    let first = res.log.iter().find(|r| r.mean_return.is_finite()).unwrap().mean_return;
    let last = res.log.last().unwrap().mean_return;
    assert!(last > first + 0.5, "{first} -> {last}");
}

#[test]
fn sebulba_improves_catch_returns_with_split_updates() {
    let cfg = SebulbaConfig {
        actor_cores: 1,
        learner_cores: 2,
        threads_per_actor_core: 2,
        split_updates: 2,
        log_interval: 50,
        ..SebulbaConfig::new(8, 16, 1_000_000)
    };
    let res = sebulba_train(&mesh(4, 4), &cfg, &agent()).unwrap();
    assert!(res.params.is_finite());
    let first = res.log.iter().find(|r| r.mean_return.is_finite()).unwrap().mean_return;
    let last = res.log.last().unwrap().mean_return;
    assert!(last > first + 0.5, "{first} -> {last}");
}

#[test]
fn sebulba_learner_sees_only_device_data() {
    let cfg = SebulbaConfig {
        actor_cores: 2,
        learner_cores: 2,
        threads_per_actor_core: 2,
        ..SebulbaConfig::new(8, 4, 8 * 4 * 20)
    };
    let res = sebulba_train(&mesh(4, 4), &cfg, &agent()).unwrap();
    let p = res.params.values().len() as u64 * 4;
    for c in &res.learner_cores {
        let s = res.transfers.cores[&c.0];
        assert_eq!(s.h2d_bytes, 2 * p);
        assert!(s.d2d_bytes > 0 && s.collectives > 0);
    }
    for c in &res.actor_cores {
        let busy = res.actor_busy[c];
        assert!((0.0..=1.0).contains(&busy), "{busy}");
    }
}
