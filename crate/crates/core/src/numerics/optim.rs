use serde::{Deserialize, Serialize};

use super::{Grads, NumericsError, Params};

/// SGD state: a step counter and a velocity buffer mirroring the params.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub momentum: f32,
    pub velocity: Vec<f32>,
}

impl OptimizerState {
    pub fn new(params: &Params, momentum: f32) -> Self {
        OptimizerState {
            step_count: 0,
            momentum,
            velocity: vec![0.0; params.values().len()],
        }
    }
}

/// `v ← μ·v + g; θ ← θ − lr·v`. With `μ = 0` this is plain SGD.
pub fn sgd_update(
    params: &Params,
    grads: &Grads,
    state: &OptimizerState,
    lr: f32,
) -> Result<(Params, OptimizerState), NumericsError> {
    if !params.same_layout(grads) || state.velocity.len() != params.values().len() {
        return Err(NumericsError::ShapeMismatch {
            context: "sgd_update",
            expected: vec![params.values().len()],
            found: vec![grads.values().len(), state.velocity.len()],
        });
    }
    let mut p = params.clone();
    let mut s = state.clone();
    if state.momentum == 0.0 {
        for (w, g) in p.values_mut().iter_mut().zip(grads.values()) {
            *w -= lr * g;
        }
    } else {
        for ((w, v), g) in p
            .values_mut()
            .iter_mut()
            .zip(s.velocity.iter_mut())
            .zip(grads.values())
        {
            *v = state.momentum * *v + g;
            *w -= lr * *v;
        }
    }
    s.step_count += 1;
    Ok((p, s))
}
