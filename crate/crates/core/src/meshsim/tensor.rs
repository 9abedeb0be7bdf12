use serde::{Deserialize, Serialize};

use super::MeshError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    U32,
}

impl DType {
    pub fn size_of(self) -> usize {
        4
    }
}

#[derive(Clone, Debug)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U32(_) => DType::U32,
        }
    }
}

/// Dense row-major tensor living in host memory.
#[derive(Clone, Debug)]
pub struct HostTensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl HostTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, MeshError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MeshError::ShapeMismatch {
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(HostTensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, MeshError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn u32(shape: Vec<usize>, data: Vec<u32>) -> Result<Self, MeshError> {
        Self::new(shape, TensorData::U32(data))
    }

    /// 1-D f32 tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        HostTensor {
            shape: vec![data.len()],
            data: TensorData::F32(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_size(&self) -> u64 {
        (self.len() * self.dtype().size_of()) as u64
    }

    pub fn as_f32(&self) -> Result<&[f32], MeshError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(MeshError::DTypeMismatch {
                expected: DType::F32,
                found: DType::U32,
            }),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32], MeshError> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(MeshError::DTypeMismatch {
                expected: DType::U32,
                found: DType::F32,
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>, MeshError> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(MeshError::DTypeMismatch {
                expected: DType::F32,
                found: DType::U32,
            }),
        }
    }

    pub fn into_u32(self) -> Result<Vec<u32>, MeshError> {
        match self.data {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(MeshError::DTypeMismatch {
                expected: DType::U32,
                found: DType::F32,
            }),
        }
    }

    /// Equality of shape, dtype and raw bit patterns.
    pub fn bitwise_eq(&self, other: &HostTensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U32(a), TensorData::U32(b)) => a == b,
            _ => false,
        }
    }
}

impl AsRef<HostTensor> for HostTensor {
    fn as_ref(&self) -> &HostTensor {
        self
    }
}
