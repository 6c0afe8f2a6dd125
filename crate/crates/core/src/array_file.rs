//! On-disk 2-D arrays: a raw little-endian `f32` row-major payload
//! (`<stem>.f32`) and a JSON header sidecar (`<stem>.hdr`).
//!
//! Boolean masks are stored as 0/1. Headers carry provenance and no
//! timestamps, so identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    /// `[rows, cols]`.
    pub shape: Vec<usize>,
    pub units: String,
    /// `[dz, dx]` in meters, when the array lives on a grid.
    pub spacing_m: Option<[f64; 2]>,
    /// Semantic role, e.g. `sos`, `delays`, `kernel`, `inclusion_mask`.
    pub role: String,
    pub creator: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ArrayHeader {
    pub fn new(role: &str, units: &str) -> Self {
        Self {
            shape: Vec::new(),
            units: units.to_string(),
            spacing_m: None,
            role: role.to_string(),
            creator: format!("sosconv {}", env!("CARGO_PKG_VERSION")),
            seed: None,
            config_hash: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_spacing(mut self, dz: f64, dx: f64) -> Self {
        self.spacing_m = Some([dz, dx]);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_config_hash(mut self, hash: &str) -> Self {
        self.config_hash = Some(hash.to_string());
        self
    }

    pub fn with_meta(mut self, key: &str, value: serde_json::Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }
}

pub fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("f32")
}

pub fn header_path(stem: &Path) -> PathBuf {
    stem.with_extension("hdr")
}

/// Writes `data` as `f32`; the header's `shape` is filled in.
pub fn write_array(stem: &Path, data: &Array2<f64>, header: &ArrayHeader) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("refusing to write non-finite values to {}", stem.display())));
    }
    let mut header = header.clone();
    header.shape = vec![data.nrows(), data.ncols()];
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let p = payload_path(stem);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    let h = header_path(stem);
    let mut text = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&h, text).map_err(|e| Error::io(&h, e))?;
    Ok(())
}

pub fn write_mask(stem: &Path, mask: &Array2<bool>, header: &ArrayHeader) -> Result<()> {
    write_array(stem, &mask.mapv(|v| if v { 1.0 } else { 0.0 }), header)
}

pub fn read_header(stem: &Path) -> Result<ArrayHeader> {
    let h = header_path(stem);
    let text = fs::read_to_string(&h).map_err(|e| Error::io(&h, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", h.display())))
}

pub fn read_array(stem: &Path) -> Result<(Array2<f64>, ArrayHeader)> {
    let header = read_header(stem)?;
    if header.shape.len() != 2 {
        return Err(Error::Format(format!(
            "{}: expected a 2-D shape, got {:?}",
            header_path(stem).display(),
            header.shape
        )));
    }
    let p = payload_path(stem);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let n = header.shape[0] * header.shape[1];
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, shape {:?} needs {}",
            p.display(),
            bytes.len(),
            header.shape,
            4 * n
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((header.shape[0], header.shape[1]), values).expect("checked length");
    Ok((data, header))
}

pub fn read_mask(stem: &Path) -> Result<(Array2<bool>, ArrayHeader)> {
    let (data, header) = read_array(stem)?;
    if data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format(format!("{}: mask values must be 0 or 1", payload_path(stem).display())));
    }
    Ok((data.mapv(|v| v == 1.0), header))
}
