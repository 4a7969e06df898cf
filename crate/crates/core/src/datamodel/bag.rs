//! Patch-feature bags and their binary file format.
//!
//! A feature file is one JSON header line, `{"n_patches":N,"dim":D,"dtype":"f32le"}`
//! (optionally followed by a `"coords"` array of `[x, y]` pairs), a newline,
//! then `N·D` little-endian `f32` values in row-major order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    n_patches: usize,
    dim: usize,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<[i64; 2]>>,
}

/// Features of the patches of one slide (or, after patient-level grouping,
/// of all slides of a case).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub case_id: String,
    pub slide_id: String,
    /// `N × d_v`, stored as `f32` and widened on load.
    pub features: Array2<f32>,
    pub coords: Option<Vec<[i64; 2]>>,
}

impl PatchBag {
    pub fn new(
        case_id: impl Into<String>,
        slide_id: impl Into<String>,
        features: Array2<f32>,
        coords: Option<Vec<[i64; 2]>>,
    ) -> Result<Self> {
        let bag = Self {
            case_id: case_id.into(),
            slide_id: slide_id.into(),
            features,
            coords,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn n_patches(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(Error::invalid("n_patches", "a bag needs at least one patch"));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of slide {}", self.slide_id)));
        }
        if let Some(c) = &self.coords {
            if c.len() != self.features.nrows() {
                return Err(Error::Shape(format!(
                    "{} coords for {} patches",
                    c.len(),
                    self.features.nrows()
                )));
            }
        }
        Ok(())
    }

    /// Encodes the feature file bytes.
    pub fn encode(&self) -> Vec<u8> {
        encode_features(&self.features, self.coords.as_deref())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub fn encode_features(features: &Array2<f32>, coords: Option<&[[i64; 2]]>) -> Vec<u8> {
    let header = FeatureHeader {
        n_patches: features.nrows(),
        dim: features.ncols(),
        dtype: "f32le".into(),
        coords: coords.map(<[_]>::to_vec),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.push(b'\n');
    out.reserve(features.len() * 4);
    for &v in features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decoded feature file contents (identity comes from the manifest).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub features: Array2<f32>,
    pub coords: Option<Vec<[i64; 2]>>,
}

/// Parses only the header line; returns `(n_patches, dim)`.
pub fn decode_feature_header(bytes: &[u8]) -> Result<(usize, usize)> {
    let (header, _) = split_header(bytes)?;
    Ok((header.n_patches, header.dim))
}

fn split_header(bytes: &[u8]) -> Result<(FeatureHeader, &[u8])> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid("feature file", "missing header line"))?;
    let header: FeatureHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::json("feature header", &e))?;
    if header.dtype != "f32le" {
        return Err(Error::invalid("dtype", format!("unsupported {}", header.dtype)));
    }
    Ok((header, &bytes[newline + 1..]))
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let (header, payload) = split_header(bytes)?;
    let expected = header
        .n_patches
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Shape("header dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Shape(format!(
            "header declares {}x{} ({} bytes) but payload has {} bytes",
            header.n_patches,
            header.dim,
            expected,
            payload.len()
        )));
    }
    if header.n_patches == 0 {
        return Err(Error::invalid("n_patches", "a bag needs at least one patch"));
    }
    if let Some(c) = &header.coords {
        if c.len() != header.n_patches {
            return Err(Error::Shape(format!(
                "{} coords for {} patches",
                c.len(),
                header.n_patches
            )));
        }
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "feature value at row {}, column {}",
            i / header.dim.max(1),
            i % header.dim.max(1)
        )));
    }
    let features =
        Array2::from_shape_vec((header.n_patches, header.dim), values).expect("length checked");
    Ok(FeatureFile {
        features,
        coords: header.coords,
    })
}

/// Reads a feature file into a [`PatchBag`] with the given identity.
pub fn load_patch_bag(path: &Path, case_id: &str, slide_id: &str) -> Result<PatchBag> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = decode_features(&bytes)?;
    PatchBag::new(case_id, slide_id, file.features, file.coords)
}
