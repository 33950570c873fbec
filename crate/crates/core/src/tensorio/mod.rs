//! Portable tensor files, dataset manifests and the synthetic data generator.
//!
//! # Tensor file layout
//!
//! ```text
//! offset  size        field
//! 0       4           magic "AAHR"
//! 4       2           version (u16, little-endian), currently 1
//! 6       1           ndim (u8, >= 1)
//! 7       4 * ndim    dims (u32 each, little-endian, every dim >= 1)
//! ...     4 * prod    payload (f32 little-endian, row-major)
//! ```
//!
//! There is no padding and no trailer. A file whose length differs from
//! `7 + 4 * ndim + 4 * prod(dims)` is rejected.

mod manifest;
mod synth;

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub use manifest::{read_bundle, BundleFiles, DatasetManifest, FeatureBundle, FeatureDims, PairEntry};
pub use synth::{generate_synthetic, synthetic_concept, SynthSpec};

pub const MAGIC: &[u8; 4] = b"AAHR";
pub const VERSION: u16 = 1;

/// A dense `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("tensor rank {} out of range 1..=255", dims.len())));
        }
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Shape(format!("tensor dims {dims:?} must be in 1..=u32::MAX")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Stores a matrix, rounding each entry to `f32`.
    pub fn from_mat(m: &Mat) -> Self {
        let data = m.iter().map(|&v| v as f32).collect();
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    /// Interprets the tensor as a matrix; a 1-D tensor becomes a single row.
    pub fn to_mat(&self) -> Result<Mat> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Shape(format!("expected rank 1 or 2, got dims {other:?}")))
            }
        };
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Ok(Array2::from_shape_vec((r, c), data).expect("dims checked at construction"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 {
            return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic, expected \"AAHR\"".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let ndim = bytes[6] as usize;
        if ndim == 0 {
            return Err(Error::Format("ndim must be at least 1".into()));
        }
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format(format!("truncated header: need {header} bytes")));
        }
        let dims: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero dimension in {dims:?}")));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let expected = count
            .checked_mul(4)
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload size mismatch for dims {dims:?}: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "refusing to write non-finite value at flat index {i} to {}",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    Tensor::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_mat(m: &Mat, path: impl AsRef<Path>) -> Result<()> {
    write_tensor(&Tensor::from_mat(m), path)
}

pub fn read_mat(path: impl AsRef<Path>) -> Result<Mat> {
    read_tensor(path)?.to_mat()
}
