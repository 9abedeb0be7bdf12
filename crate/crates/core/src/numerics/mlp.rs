//! Forward and backward passes of the policy/value MLP.
//!
//! `obs -> tanh(obs·W1 + b1) = h`, `logits = h·Wpi + bpi`, `value = h·Wv + bv`.
//!
//! Every row is computed independently with a fixed operation order, so a
//! row's outputs do not depend on the batch it was computed in. Per-row
//! gradients are summed sequentially within a group of rows (one environment's
//! time steps), groups are combined with a pairwise tree in ascending order,
//! and the total is scaled by `1 / rows`.

use super::{Grads, MlpDims, NumericsError, Params, Tensor};

struct MlpView<'a> {
    dims: MlpDims,
    w1: &'a [f32],
    b1: &'a [f32],
    wpi: &'a [f32],
    bpi: &'a [f32],
    wv: &'a [f32],
    bv: f32,
}

impl<'a> MlpView<'a> {
    fn new(p: &'a Params) -> Result<Self, NumericsError> {
        let dims = MlpDims::from_layout(p.layout())?;
        Ok(MlpView {
            dims,
            w1: p.get("W1").unwrap(),
            b1: p.get("b1").unwrap(),
            wpi: p.get("Wpi").unwrap(),
            bpi: p.get("bpi").unwrap(),
            wv: p.get("Wv").unwrap(),
            bv: p.get("bv").unwrap()[0],
        })
    }

    fn row(&self, x: &[f32], h: &mut [f32], logits: &mut [f32]) -> f32 {
        let MlpDims { hidden_dim: hd, num_actions: na, .. } = self.dims;
        h.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let w = &self.w1[i * hd..(i + 1) * hd];
                for (acc, &wij) in h.iter_mut().zip(w) {
                    *acc += xi * wij;
                }
            }
        }
        for (hj, &b) in h.iter_mut().zip(self.b1) {
            *hj = (*hj + b).tanh();
        }
        for (k, out) in logits.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (j, &hj) in h.iter().enumerate() {
                acc += hj * self.wpi[j * na + k];
            }
            *out = acc + self.bpi[k];
        }
        let mut v = 0.0f32;
        for (&hj, &w) in h.iter().zip(self.wv) {
            v += hj * w;
        }
        v + self.bv
    }
}

/// Activations kept from a forward pass for reuse by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub rows: usize,
    pub hidden: Vec<f32>,
    pub logits: Vec<f32>,
    pub values: Vec<f32>,
}

impl ForwardCache {
    pub fn logits_row(&self, i: usize) -> &[f32] {
        let a = self.logits.len() / self.rows.max(1);
        &self.logits[i * a..(i + 1) * a]
    }

    /// Concatenate caches row-wise.
    pub fn concat(parts: &[ForwardCache]) -> ForwardCache {
        let mut out = ForwardCache {
            rows: 0,
            hidden: Vec::new(),
            logits: Vec::new(),
            values: Vec::new(),
        };
        for p in parts {
            out.rows += p.rows;
            out.hidden.extend_from_slice(&p.hidden);
            out.logits.extend_from_slice(&p.logits);
            out.values.extend_from_slice(&p.values);
        }
        out
    }
}

fn check_obs(dims: &MlpDims, obs: &[f32], rows: usize) -> Result<(), NumericsError> {
    if obs.len() != rows * dims.obs_dim {
        return Err(NumericsError::ShapeMismatch {
            context: "observations",
            expected: vec![rows, dims.obs_dim],
            found: vec![obs.len()],
        });
    }
    if obs.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite("observations"));
    }
    Ok(())
}

/// Forward pass over `rows` observations laid out row-major in `obs`.
pub fn forward_cached(params: &Params, obs: &[f32], rows: usize) -> Result<ForwardCache, NumericsError> {
    let view = MlpView::new(params)?;
    check_obs(&view.dims, obs, rows)?;
    let MlpDims { obs_dim, hidden_dim, num_actions } = view.dims;
    let mut cache = ForwardCache {
        rows,
        hidden: vec![0.0; rows * hidden_dim],
        logits: vec![0.0; rows * num_actions],
        values: vec![0.0; rows],
    };
    for r in 0..rows {
        cache.values[r] = view.row(
            &obs[r * obs_dim..(r + 1) * obs_dim],
            &mut cache.hidden[r * hidden_dim..(r + 1) * hidden_dim],
            &mut cache.logits[r * num_actions..(r + 1) * num_actions],
        );
    }
    debug_assert!(cache.logits.iter().chain(&cache.values).all(|v| v.is_finite()));
    Ok(cache)
}

/// Logits `[B, A]` and values `[B]` for an observation batch `[B, obs_dim]`.
pub fn forward(params: &Params, obs: &Tensor) -> Result<(Tensor, Tensor), NumericsError> {
    if obs.shape().len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            context: "forward input",
            expected: vec![0, 0],
            found: obs.shape().to_vec(),
        });
    }
    let rows = obs.shape()[0];
    let cache = forward_cached(params, obs.data(), rows)?;
    let a = cache.logits.len() / rows.max(1);
    Ok((
        Tensor::new(vec![rows, a], cache.logits)?,
        Tensor::new(vec![rows], cache.values)?,
    ))
}

pub fn log_softmax_row(logits: &[f32], out: &mut [f32]) {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f32;
    for &z in logits {
        s += (z - m).exp();
    }
    let lse = m + s.ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

pub fn softmax_row(logits: &[f32], out: &mut [f32]) {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f32;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|v| *v /= s);
}

/// Streaming pairwise-tree sum of equally sized vectors.
///
/// Produces exactly the same bits as a level-by-level pairwise reduction of
/// all pushed vectors in push order.
pub struct PairwiseAccumulator {
    width: usize,
    stack: Vec<(usize, Vec<f32>)>,
}

impl PairwiseAccumulator {
    pub fn new(width: usize) -> Self {
        PairwiseAccumulator { width, stack: Vec::new() }
    }

    pub fn push(&mut self, v: Vec<f32>) {
        assert_eq!(v.len(), self.width);
        let mut item = (1usize, v);
        while let Some((count, _)) = self.stack.last() {
            if *count != item.0 {
                break;
            }
            let (c, mut left) = self.stack.pop().unwrap();
            for (l, r) in left.iter_mut().zip(&item.1) {
                *l += *r;
            }
            item = (c * 2, left);
        }
        self.stack.push(item);
    }

    pub fn finish(mut self) -> Vec<f32> {
        let mut acc = match self.stack.pop() {
            Some((_, v)) => v,
            None => return vec![0.0; self.width],
        };
        while let Some((_, mut left)) = self.stack.pop() {
            for (l, r) in left.iter_mut().zip(&acc) {
                *l += *r;
            }
            acc = left;
        }
        acc
    }
}

/// Rows of one loss evaluation. Rows are grouped into consecutive runs of
/// `group_len` rows; gradient sums run sequentially inside a group and by
/// pairwise tree across groups.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch<'a> {
    pub obs: &'a [f32],
    pub actions: &'a [u32],
    pub advantages: &'a [f32],
    pub value_targets: &'a [f32],
    pub group_len: usize,
}

impl LossBatch<'_> {
    pub fn rows(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoeffs {
    pub value_cost: f32,
    pub entropy_cost: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossMetrics {
    pub total: f32,
    pub policy: f32,
    pub value: f32,
    pub entropy_term: f32,
    pub mean_entropy: f32,
}

fn validate_batch(dims: &MlpDims, b: &LossBatch<'_>) -> Result<(), NumericsError> {
    let n = b.rows();
    check_obs(dims, b.obs, n)?;
    if b.advantages.len() != n || b.value_targets.len() != n {
        return Err(NumericsError::ShapeMismatch {
            context: "loss targets",
            expected: vec![n],
            found: vec![b.advantages.len(), b.value_targets.len()],
        });
    }
    if n == 0 || b.group_len == 0 || n % b.group_len != 0 {
        return Err(NumericsError::InvalidArgument(format!(
            "{n} rows cannot be grouped by {}",
            b.group_len
        )));
    }
    if let Some(a) = b.actions.iter().find(|&&a| a as usize >= dims.num_actions) {
        return Err(NumericsError::InvalidArgument(format!("action {a} out of range")));
    }
    if b.advantages.iter().chain(b.value_targets).any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("loss targets"));
    }
    Ok(())
}

/// Loss and gradients, running a fresh forward pass.
pub fn loss_and_grads(
    params: &Params,
    batch: &LossBatch<'_>,
    coeffs: LossCoeffs,
) -> Result<(f32, Grads, LossMetrics), NumericsError> {
    let cache = forward_cached(params, batch.obs, batch.rows())?;
    loss_and_grads_cached(params, batch, &cache, coeffs)
}

/// Loss and gradients reusing activations from an earlier forward pass with
/// the same parameters and observations.
///
/// Loss = mean over rows of `-A·log π(a|x) + value_cost·½(v - target)² -
/// entropy_cost·H(π(·|x))`; advantages and targets are constants.
pub fn loss_and_grads_cached(
    params: &Params,
    batch: &LossBatch<'_>,
    cache: &ForwardCache,
    coeffs: LossCoeffs,
) -> Result<(f32, Grads, LossMetrics), NumericsError> {
    let view = MlpView::new(params)?;
    validate_batch(&view.dims, batch)?;
    let n = batch.rows();
    if cache.rows != n {
        return Err(NumericsError::ShapeMismatch {
            context: "forward cache",
            expected: vec![n],
            found: vec![cache.rows],
        });
    }
    let MlpDims { obs_dim, hidden_dim: hd, num_actions: na } = view.dims;
    let layout = params.layout();
    let r_w1 = layout.entry("W1").unwrap().range();
    let r_b1 = layout.entry("b1").unwrap().range();
    let r_wpi = layout.entry("Wpi").unwrap().range();
    let r_bpi = layout.entry("bpi").unwrap().range();
    let r_wv = layout.entry("Wv").unwrap().range();
    let i_bv = layout.entry("bv").unwrap().offset;

    let mut logp = vec![0.0f32; na];
    let mut dlogits = vec![0.0f32; na];
    let mut dpre = vec![0.0f32; hd];
    let (mut pg_sum, mut v_sum, mut ent_sum) = (0.0f64, 0.0f64, 0.0f64);
    let mut tree = PairwiseAccumulator::new(layout.total());

    for rows in (0..n).collect::<Vec<_>>().chunks(batch.group_len) {
        let mut g = vec![0.0f32; layout.total()];
        for &r in rows {
            let x = &batch.obs[r * obs_dim..(r + 1) * obs_dim];
            let h = &cache.hidden[r * hd..(r + 1) * hd];
            let logits = &cache.logits[r * na..(r + 1) * na];
            let v = cache.values[r];
            let a = batch.actions[r] as usize;
            let adv = batch.advantages[r];
            let target = batch.value_targets[r];

            log_softmax_row(logits, &mut logp);
            let mut entropy = 0.0f32;
            for &lp in &logp {
                entropy -= lp.exp() * lp;
            }
            pg_sum += f64::from(-adv * logp[a]);
            let err = v - target;
            v_sum += f64::from(0.5 * err * err);
            ent_sum += f64::from(entropy);

            for k in 0..na {
                let p = logp[k].exp();
                let onehot = if k == a { 1.0 } else { 0.0 };
                dlogits[k] = -adv * (onehot - p) + coeffs.entropy_cost * p * (logp[k] + entropy);
            }
            let dv = coeffs.value_cost * err;

            for j in 0..hd {
                let mut dh = dv * view.wv[j];
                for k in 0..na {
                    dh += dlogits[k] * view.wpi[j * na + k];
                }
                dpre[j] = dh * (1.0 - h[j] * h[j]);
            }
            let gw1 = &mut g[r_w1.clone()];
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    for (gij, &d) in gw1[i * hd..(i + 1) * hd].iter_mut().zip(&dpre) {
                        *gij += xi * d;
                    }
                }
            }
            for (gb, &d) in g[r_b1.clone()].iter_mut().zip(&dpre) {
                *gb += d;
            }
            let gwpi = &mut g[r_wpi.clone()];
            for j in 0..hd {
                for k in 0..na {
                    gwpi[j * na + k] += h[j] * dlogits[k];
                }
            }
            for (gb, &d) in g[r_bpi.clone()].iter_mut().zip(&dlogits) {
                *gb += d;
            }
            for (gw, &hj) in g[r_wv.clone()].iter_mut().zip(h) {
                *gw += hj * dv;
            }
            g[i_bv] += dv;
        }
        tree.push(g);
    }

    let scale = 1.0 / n as f32;
    let mut grads = tree.finish();
    grads.iter_mut().for_each(|v| *v *= scale);
    let grads = Params::from_values(std::sync::Arc::clone(layout), grads)?;
    debug_assert!(grads.is_finite());

    let nf = n as f64;
    let policy = (pg_sum / nf) as f32;
    let value = (f64::from(coeffs.value_cost) * v_sum / nf) as f32;
    let mean_entropy = (ent_sum / nf) as f32;
    let entropy_term = -coeffs.entropy_cost * mean_entropy;
    let total = policy + value + entropy_term;
    Ok((
        total,
        grads,
        LossMetrics {
            total,
            policy,
            value,
            entropy_term,
            mean_entropy,
        },
    ))
}
