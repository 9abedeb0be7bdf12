use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{checkpoint, NumericsError};
use crate::meshsim::HostTensor;
use crate::rng::RngKey;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat parameter vector.
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Names, shapes and offsets of every tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new(named_shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let entries = named_shapes
            .into_iter()
            .map(|(name, shape)| {
                let e = ParamEntry { name, shape, offset };
                offset += e.len();
                e
            })
            .collect();
        ParamLayout { entries, total: offset }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub num_actions: usize,
}

impl MlpDims {
    pub fn layout(&self) -> ParamLayout {
        let MlpDims { obs_dim, hidden_dim, num_actions } = *self;
        ParamLayout::new(vec![
            ("W1".into(), vec![obs_dim, hidden_dim]),
            ("b1".into(), vec![hidden_dim]),
            ("Wpi".into(), vec![hidden_dim, num_actions]),
            ("bpi".into(), vec![num_actions]),
            ("Wv".into(), vec![hidden_dim, 1]),
            ("bv".into(), vec![1]),
        ])
    }

    /// Recover the dims from an MLP layout.
    pub fn from_layout(layout: &ParamLayout) -> Result<Self, NumericsError> {
        let w1 = layout
            .entry("W1")
            .ok_or_else(|| NumericsError::InvalidDims("layout lacks W1".into()))?;
        let wpi = layout
            .entry("Wpi")
            .ok_or_else(|| NumericsError::InvalidDims("layout lacks Wpi".into()))?;
        let dims = MlpDims {
            obs_dim: w1.shape[0],
            hidden_dim: w1.shape[1],
            num_actions: wpi.shape[1],
        };
        if dims.layout() != *layout {
            return Err(NumericsError::InvalidDims("layout is not an MLP layout".into()));
        }
        Ok(dims)
    }
}

/// Flat parameter vector plus its layout. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    layout: Arc<ParamLayout>,
    values: Vec<f32>,
}

pub type Grads = Params;

impl Params {
    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f32>) -> Result<Self, NumericsError> {
        if values.len() != layout.total() {
            return Err(NumericsError::ShapeMismatch {
                context: "params",
                expected: vec![layout.total()],
                found: vec![values.len()],
            });
        }
        Ok(Params { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total()];
        Params { layout, values }
    }

    /// Zero-filled parameters with the same layout.
    pub fn zeros_like(&self) -> Self {
        Params::zeros(Arc::clone(&self.layout))
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.layout.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let r = self.layout.entry(name)?.range();
        Some(&mut self.values[r])
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.same_layout(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the raw bits, for cheap equality checks across cores.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.values)
    }

    pub fn to_host(&self) -> HostTensor {
        HostTensor::vector(self.values.clone())
    }

    pub fn from_host(layout: Arc<ParamLayout>, t: &HostTensor) -> Result<Self, NumericsError> {
        let v = t
            .as_f32()
            .map_err(|e| NumericsError::InvalidArgument(e.to_string()))?;
        Self::from_values(layout, v.to_vec())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let tensors: Vec<(&str, &[usize], &[f32])> = self
            .layout
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), e.shape.as_slice(), &self.values[e.range()]))
            .collect();
        checkpoint::encode(&tensors)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let tensors = checkpoint::decode(bytes)?;
        let layout = ParamLayout::new(tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect());
        let values = tensors.into_iter().flat_map(|t| t.data).collect();
        Params::from_values(Arc::new(layout), values)
    }
}

pub fn fingerprint(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Initialise the policy/value MLP.
///
/// Trunk weights are LeCun-normal, head weights are scaled down so the
/// initial policy is close to uniform and initial values close to zero.
/// Biases start at zero.
pub fn mlp_init(key: RngKey, dims: MlpDims) -> Result<Params, NumericsError> {
    if dims.obs_dim == 0 || dims.hidden_dim == 0 || dims.num_actions == 0 {
        return Err(NumericsError::InvalidDims(format!("{dims:?} must all be positive")));
    }
    let layout = Arc::new(dims.layout());
    let mut p = Params::zeros(Arc::clone(&layout));
    let (k_trunk, k_heads) = key.split();
    let (k_pi, k_v) = k_heads.split();
    let mut fill = |name: &str, key: RngKey, std: f32| {
        let mut s = key.stream();
        for w in p.get_mut(name).unwrap() {
            *w = s.normal() * std;
        }
    };
    fill("W1", k_trunk, (1.0 / dims.obs_dim as f32).sqrt());
    fill("Wpi", k_pi, 0.01);
    fill("Wv", k_v, 0.01);
    Ok(p)
}
