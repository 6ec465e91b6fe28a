//! On-disk interchange for activation matrices, dataset manifests and
//! calibrated basis bundles.
//!
//! Tensor files use a fixed little-endian layout:
//!
//! ```text
//! "SEE1" | dtype u8 (0 = f32) | ndim u8 (2) | rows u32 | cols u32 | rows*cols f32, row-major
//! ```
//!
//! Values are stored as 32-bit floats and widened to `f64` on read; all
//! arithmetic in this crate happens in 64-bit.

mod bundle;
mod manifest;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use bundle::{load_bundle, save_bundle, NoiseBasisBundle, Provenance, BUNDLE_FILE};
pub use manifest::{
    load_dataset, load_manifest, write_manifest, ActivationDataset, DatasetManifest,
    ManifestSample, Sample, SampleKind,
};

pub const MAGIC: [u8; 4] = *b"SEE1";
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 14;

/// One sample's activations at one layer: `frames × dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSequence {
    layer_id: u32,
    data: DMatrix<f64>,
}

impl ActivationSequence {
    pub fn new(layer_id: u32, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Validation(format!(
                "activation matrix must be at least 1x1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        check_finite(&data)?;
        Ok(Self { layer_id, data })
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn with_layer_id(mut self, layer_id: u32) -> Self {
        self.layer_id = layer_id;
        self
    }

    /// Number of time steps `T`.
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    /// Hidden width `d`.
    pub fn dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if let Some((idx, v)) = m.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        let (col, row) = (idx / m.nrows(), idx % m.nrows());
        return Err(Error::Validation(format!(
            "non-finite value {v} at ({row}, {col})"
        )));
    }
    Ok(())
}

/// Serializes a matrix in the tensor file layout. Zero-sized dimensions are
/// allowed here (empty noise bases are stored as `d × 0`).
pub fn encode_tensor(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    let rows32 = u32::try_from(rows)
        .map_err(|_| Error::Validation(format!("row count {rows} exceeds u32")))?;
    let cols32 = u32::try_from(cols)
        .map_err(|_| Error::Validation(format!("column count {cols} exceeds u32")))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    buf.extend_from_slice(&MAGIC);
    buf.push(DTYPE_F32);
    buf.push(2);
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&cols32.to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            let v = m[(r, c)] as f32;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "value {} at ({r}, {c}) overflows f32",
                    m[(r, c)]
                )));
            }
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(format_err(format!(
            "file is {} bytes, too short for magic",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(format_err(format!(
            "bad magic {:02x} {:02x} {:02x} {:02x} ({:?})",
            bytes[0],
            bytes[1],
            bytes[2],
            bytes[3],
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != DTYPE_F32 {
        return Err(format_err(format!("unsupported dtype code {}", bytes[4])));
    }
    if bytes[5] != 2 {
        return Err(format_err(format!("ndim must be 2, got {}", bytes[5])));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(format!("header dimensions {rows}x{cols} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(format_err(format!(
            "{} trailing bytes after {rows}x{cols} payload",
            payload.len() - expected
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let m = DMatrix::from_row_slice(rows, cols, &values);
    check_finite(&m).map_err(|e| format_err(e.to_string()))?;
    Ok(m)
}

pub fn write_tensor(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn write_activation(seq: &ActivationSequence, path: impl AsRef<Path>) -> Result<()> {
    write_tensor(seq.data(), path)
}

/// Reads a single activation file. The file carries no layer id, so the
/// returned sequence is tagged with layer 0; see [`ActivationSequence::with_layer_id`].
pub fn read_activation(path: impl AsRef<Path>) -> Result<ActivationSequence> {
    let path = path.as_ref();
    let m = read_tensor(path)?;
    ActivationSequence::new(0, m).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
