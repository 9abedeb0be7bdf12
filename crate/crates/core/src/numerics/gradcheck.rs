//! Central-difference gradient checking.

use serde::Serialize;

use super::{Grads, LossBatch, LossCoeffs, MlpDims, NumericsError, Params};

/// Gradient entries smaller than this are compared on an absolute scale:
/// relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct TensorFdError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub per_tensor: Vec<TensorFdError>,
    pub max_rel_error: f64,
    /// Names of tensors whose worst entry exceeds the tolerance.
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare `analytic` gradients against central differences of `loss_fn`
/// evaluated at `params ± epsilon` (one entry at a time, in f64).
pub fn finite_diff_check<F>(
    params: &Params,
    analytic: &Grads,
    loss_fn: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<FdReport, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(NumericsError::InvalidArgument("epsilon must be positive".into()));
    }
    if !params.same_layout(analytic) {
        return Err(NumericsError::InvalidArgument("gradient layout differs from params".into()));
    }
    let mut theta: Vec<f64> = params.values().iter().map(|&v| f64::from(v)).collect();
    let mut per_tensor = Vec::new();
    for entry in params.layout().entries() {
        let mut worst = TensorFdError {
            name: entry.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in entry.range() {
            let orig = theta[idx];
            theta[idx] = orig + epsilon;
            let up = loss_fn(&theta);
            theta[idx] = orig - epsilon;
            let down = loss_fn(&theta);
            theta[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = f64::from(analytic.values()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            if rel > worst.max_rel_error || rel.is_nan() {
                worst = TensorFdError {
                    name: entry.name.clone(),
                    max_rel_error: rel,
                    worst_index: idx - entry.offset,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_tensor.push(worst);
    }
    let max_rel_error = per_tensor.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let failures = per_tensor
        .iter()
        .filter(|t| !(t.max_rel_error <= tolerance))
        .map(|t| t.name.clone())
        .collect();
    Ok(FdReport {
        epsilon,
        tolerance,
        per_tensor,
        max_rel_error,
        failures,
    })
}

/// The MLP loss evaluated in f64 at an arbitrary flat parameter vector.
///
/// Forward-only; this is the reference the hand-written backward pass is
/// checked against.
pub fn loss_value_f64(dims: MlpDims, theta: &[f64], batch: &LossBatch<'_>, coeffs: LossCoeffs) -> f64 {
    let layout = dims.layout();
    let at = |name: &str| &theta[layout.entry(name).unwrap().range()];
    let (w1, b1, wpi, bpi, wv, bv) = (at("W1"), at("b1"), at("Wpi"), at("bpi"), at("Wv"), at("bv")[0]);
    let MlpDims { obs_dim, hidden_dim: hd, num_actions: na } = dims;
    let n = batch.rows();
    let mut total = 0.0;
    let mut h = vec![0.0; hd];
    let mut logits = vec![0.0; na];
    for r in 0..n {
        let x = &batch.obs[r * obs_dim..(r + 1) * obs_dim];
        for j in 0..hd {
            let mut s = b1[j];
            for i in 0..obs_dim {
                s += f64::from(x[i]) * w1[i * hd + j];
            }
            h[j] = s.tanh();
        }
        for k in 0..na {
            logits[k] = bpi[k] + (0..hd).map(|j| h[j] * wpi[j * na + k]).sum::<f64>();
        }
        let v = bv + (0..hd).map(|j| h[j] * wv[j]).sum::<f64>();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let entropy: f64 = logits.iter().map(|z| -(z - lse).exp() * (z - lse)).sum();
        let a = batch.actions[r] as usize;
        let adv = f64::from(batch.advantages[r]);
        let err = v - f64::from(batch.value_targets[r]);
        total += -adv * (logits[a] - lse) + f64::from(coeffs.value_cost) * 0.5 * err * err
            - f64::from(coeffs.entropy_cost) * entropy;
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{loss_and_grads, mlp_init};
    use crate::rng::RngKey;

    struct Data {
        obs: Vec<f32>,
        actions: Vec<u32>,
        adv: Vec<f32>,
        vt: Vec<f32>,
    }

    fn data(seed: u64, rows: usize, dims: MlpDims) -> Data {
        let mut s = RngKey::from_seed(seed).stream();
        Data {
            obs: (0..rows * dims.obs_dim).map(|_| s.normal()).collect(),
            actions: (0..rows).map(|_| s.below(dims.num_actions as u32)).collect(),
            adv: (0..rows).map(|_| s.normal()).collect(),
            vt: (0..rows).map(|_| s.normal()).collect(),
        }
    }

    fn setup() -> (MlpDims, Params, Data, LossCoeffs) {
        let dims = MlpDims { obs_dim: 6, hidden_dim: 5, num_actions: 3 };
        let mut p = mlp_init(RngKey::from_seed(1), dims).unwrap();
        let mut s = RngKey::from_seed(2).stream();
        for w in p.values_mut() {
            *w += 0.3 * s.normal();
        }
        (dims, p, data(3, 8, dims), LossCoeffs { value_cost: 0.5, entropy_cost: 0.05 })
    }

    #[test]
    fn analytic_gradients_pass() {
        let (dims, p, d, coeffs) = setup();
        let batch = LossBatch {
            obs: &d.obs,
            actions: &d.actions,
            advantages: &d.adv,
            value_targets: &d.vt,
            group_len: 4,
        };
        let (loss, g, _) = loss_and_grads(&p, &batch, coeffs).unwrap();
        let theta: Vec<f64> = p.values().iter().map(|&v| v as f64).collect();
        let ref_loss = loss_value_f64(dims, &theta, &batch, coeffs);
        assert!((loss as f64 - ref_loss).abs() < 1e-5);
        let report = finite_diff_check(&p, &g, |t| loss_value_f64(dims, t, &batch, coeffs), 1e-3, 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-3);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (dims, p, d, coeffs) = setup();
        let batch = LossBatch {
            obs: &d.obs,
            actions: &d.actions,
            advantages: &d.adv,
            value_targets: &d.vt,
            group_len: 8,
        };
        let (_, mut g, _) = loss_and_grads(&p, &batch, coeffs).unwrap();
        let (worst, _) = g
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        g.values_mut()[worst] *= 2.0;
        let report = finite_diff_check(&p, &g, |t| loss_value_f64(dims, t, &batch, coeffs), 1e-3, 1e-3).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
    }

    #[test]
    fn zero_epsilon_rejected() {
        let (_, p, _, _) = setup();
        let g = p.zeros_like();
        assert!(finite_diff_check(&p, &g, |_| 0.0, 0.0, 1e-3).is_err());
    }
}
