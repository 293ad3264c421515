//! Binary tensor blobs: an 8-byte little-endian header length, a JSON header,
//! then the raw little-endian payload.
//!
//! Weight blobs list `(name, shape, offset)` per tensor. Latent blobs carry a
//! single tensor with `{shape, dtype, has_ref_prefix}`.

use std::fs;
use std::path::Path;

use mive_autograd::{Matrix, ParamStore};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{MiveError, Result};
use crate::tensor::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentHeader {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub has_ref_prefix: bool,
}

fn encode_values(values: &[f64], dtype: DType, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn decode_values(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect(),
    }
}

fn assemble<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn split<H: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<(H, &[u8])> {
    if bytes.len() < 8 {
        return Err(MiveError::format("blob shorter than its length prefix"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < len {
        return Err(MiveError::format("blob header truncated"));
    }
    let header = serde_json::from_slice(&body[..len])?;
    Ok((header, &body[len..]))
}

/// Serializes a parameter store in name order.
pub fn params_to_bytes(params: &ParamStore, dtype: DType) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, m) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: vec![m.rows(), m.cols()],
            offset: payload.len(),
        });
        encode_values(m.data(), dtype, &mut payload);
    }
    assemble(&WeightHeader { dtype, tensors }, &payload)
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let (header, payload): (WeightHeader, _) = split(bytes)?;
    let width = header.dtype.width();
    let mut store = ParamStore::new();
    for t in header.tensors {
        if t.shape.len() != 2 {
            return Err(MiveError::format(format!(
                "tensor `{}` has rank {}, expected 2",
                t.name,
                t.shape.len()
            )));
        }
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + n * width;
        let slice = payload.get(t.offset..end).ok_or_else(|| {
            MiveError::format(format!("tensor `{}` runs past the payload", t.name))
        })?;
        let m = Matrix::from_vec(t.shape[0], t.shape[1], decode_values(slice, header.dtype))?;
        store.insert(t.name, m);
    }
    Ok(store)
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamStore, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, params_to_bytes(params, dtype)?).map_err(|e| MiveError::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MiveError::io(path, e))?;
    params_from_bytes(&bytes)
}

pub fn latent_to_bytes(z: &Latent, dtype: DType) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(z.data.len() * dtype.width());
    encode_values(
        &z.data.iter().copied().collect::<Vec<_>>(),
        dtype,
        &mut payload,
    );
    let header = LatentHeader {
        shape: z.data.shape().to_vec(),
        dtype,
        has_ref_prefix: z.has_ref_prefix,
    };
    assemble(&header, &payload)
}

pub fn latent_from_bytes(bytes: &[u8]) -> Result<Latent> {
    let (header, payload): (LatentHeader, _) = split(bytes)?;
    let [t, c, h, w]: [usize; 4] = header
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| MiveError::format("latent shape must have four axes"))?;
    let n = t * c * h * w;
    if payload.len() != n * header.dtype.width() {
        return Err(MiveError::format("latent payload size does not match shape"));
    }
    let data = Array4::from_shape_vec((t, c, h, w), decode_values(payload, header.dtype))
        .map_err(|e| MiveError::format(e.to_string()))?;
    Ok(Latent {
        data,
        has_ref_prefix: header.has_ref_prefix,
    })
}

pub fn save_latent(path: impl AsRef<Path>, z: &Latent) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, latent_to_bytes(z, DType::F32)?).map_err(|e| MiveError::io(path, e))
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<Latent> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MiveError::io(path, e))?;
    latent_from_bytes(&bytes)
}
