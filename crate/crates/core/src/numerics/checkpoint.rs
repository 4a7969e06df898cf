//! Named-tensor container: one JSON header line (names, shapes, dtype and a
//! free-form metadata block), a newline, then each tensor as row-major
//! little-endian `f32`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tape::Mat;
use crate::error::{Error, Result};

pub const FORMAT: &str = "lupi-tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl TensorFile {
    pub fn from_store(meta: serde_json::Value, store: &ParameterStore) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        Self { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Copies every tensor into the same-named parameter of `store`; names
    /// and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParameterStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, value) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::invalid("checkpoint", format!("unknown tensor {name}")))?;
            if store.value(id).dim() != value.dim() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint {:?} vs model {:?}",
                    value.dim(),
                    store.value(id).dim()
                )));
            }
            store.value_mut(id).assign(value);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            dtype: "f32le".into(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorHeader {
                    name: name.clone(),
                    shape: [m.nrows(), m.ncols()],
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        for (_, m) in &self.tensors {
            for &v in m.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::invalid("checkpoint", "missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::json("checkpoint header", &e))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::invalid(
                "checkpoint",
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        if header.dtype != "f32le" {
            return Err(Error::invalid("checkpoint", format!("dtype {}", header.dtype)));
        }
        let mut payload = &bytes[newline + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let [rows, cols] = t.shape;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Shape(format!("tensor {} shape overflows", t.name)))?;
            if payload.len() < n {
                return Err(Error::Shape(format!("tensor {} truncated", t.name)));
            }
            let (chunk, rest) = payload.split_at(n);
            payload = rest;
            let values: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {}", t.name)));
            }
            let m = Array2::from_shape_vec((rows, cols), values).expect("length checked");
            tensors.push((t.name, m));
        }
        if !payload.is_empty() {
            return Err(Error::Shape(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn encode_decode_identity() {
        let mut store = ParameterStore::new();
        store.add("a", array![[1.0, 2.5], [-3.0, 0.125]]).unwrap();
        store.add("b", array![[7.0]]).unwrap();
        let file = TensorFile::from_store(serde_json::json!({"d_z": 4}), &store);
        let bytes = file.encode();
        let back = TensorFile::decode(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut store = ParameterStore::new();
        store.add("a", array![[1.0, 2.0]]).unwrap();
        let mut bytes = TensorFile::from_store(serde_json::Value::Null, &store).encode();
        bytes.pop();
        assert!(TensorFile::decode(&bytes).is_err());
    }

    #[test]
    fn restore_checks_shapes() {
        let mut store = ParameterStore::new();
        store.add("a", array![[1.0, 2.0]]).unwrap();
        let file = TensorFile::from_store(serde_json::Value::Null, &store);
        let mut other = ParameterStore::new();
        other.add("a", array![[1.0], [2.0]]).unwrap();
        assert!(file.restore_into(&mut other).is_err());
    }
}
