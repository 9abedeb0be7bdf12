//! Dense f32 math for a small policy/value network.

pub mod checkpoint;
mod gradcheck;
mod mlp;
mod optim;
mod params;

pub use gradcheck::{finite_diff_check, loss_value_f64, FdReport, TensorFdError, REL_ERROR_FLOOR};
pub use mlp::{
    forward, forward_cached, log_softmax_row, loss_and_grads, loss_and_grads_cached, softmax_row,
    ForwardCache, LossBatch, LossCoeffs, LossMetrics, PairwiseAccumulator,
};
pub use optim::{sgd_update, OptimizerState};
pub use params::{fingerprint, mlp_init, Grads, MlpDims, ParamEntry, ParamLayout, Params};

use crate::meshsim::HostTensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Dense row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "tensor",
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Tensor> for HostTensor {
    fn from(t: Tensor) -> Self {
        HostTensor::f32(t.shape, t.data).expect("tensor invariant")
    }
}

impl TryFrom<&HostTensor> for Tensor {
    type Error = crate::meshsim::MeshError;

    fn try_from(t: &HostTensor) -> Result<Self, Self::Error> {
        Ok(Tensor {
            shape: t.shape().to_vec(),
            data: t.as_f32()?.to_vec(),
        })
    }
}
