//! Flat binary tensor files.
//!
//! Layout: the 8-byte magic `PODRACKP`, a little-endian `u64` header length,
//! a JSON header `{"format":"f32le","tensors":[{"name","shape","offset"}]}`
//! whose offsets count f32 elements from the start of the data section, then
//! the data section as little-endian f32.

use serde::{Deserialize, Serialize};

use super::NumericsError;

pub const MAGIC: &[u8; 8] = b"PODRACKP";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(tensors: &[(&str, &[usize], &[f32])]) -> Vec<u8> {
    let mut offset = 0;
    let header = Header {
        format: "f32le".into(),
        tensors: tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = HeaderEntry {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    offset,
                };
                offset += data.len();
                e
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialize");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>, NumericsError> {
    let err = |m: &str| NumericsError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    if header.format != "f32le" {
        return Err(err("unknown format"));
    }
    let data = &bytes[16 + hlen..];
    if data.len() % 4 != 0 {
        return Err(err("data section is not a whole number of f32"));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    header
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| err("tensor extends past data section"))?;
            Ok(NamedTensor {
                name: e.name,
                shape: e.shape,
                data: slice.to_vec(),
            })
        })
        .collect()
}
