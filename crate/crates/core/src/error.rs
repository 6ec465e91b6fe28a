use std::path::PathBuf;

use crate::calibrate::LayerDiagnostics;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated tensor file {path}: expected {expected} payload bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("failed to load sample '{sample_id}' layer {layer}: {reason}")]
    Load {
        sample_id: String,
        layer: u32,
        reason: String,
    },

    #[error("invalid bundle in {path}: {reason}")]
    Bundle { path: PathBuf, reason: String },

    #[error("corrupted basis for layer {layer}: max |QᵀQ - I| = {deviation:e}")]
    Corruption { layer: u32, deviation: f64 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no {kind} samples available")]
    EmptySet { kind: String },

    #[error("semantic/noise sets must be paired: {semantic} semantic vs {noise} noise samples")]
    Pairing { semantic: usize, noise: usize },

    #[error("{}", localization_message(.diagnostics, *.mean_magnitude, *.mean_direction))]
    Localization {
        diagnostics: Vec<LayerDiagnostics>,
        mean_magnitude: f64,
        mean_direction: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sample '{sample_id}' has no activations for layer {layer}")]
    Coverage { sample_id: String, layer: u32 },

    #[error("subspace ranks {semantic} + {noise} exceed dimension {dims}")]
    Rank {
        semantic: usize,
        noise: usize,
        dims: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("outcome condition '{condition}' matches no scored sample")]
    Join { condition: String },
}

fn localization_message(diags: &[LayerDiagnostics], m_bar: f64, d_bar: f64) -> String {
    let mut msg = format!(
        "no layer exceeds both means (mean magnitude {m_bar:.6e}, mean direction {d_bar:.6e}):"
    );
    for d in diags {
        msg.push_str(&format!(
            " [layer {} M={:.6e} D={:.6e}]",
            d.layer_id, d.magnitude, d.direction
        ));
    }
    msg
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem or malformed input files,
    /// as opposed to numerical or domain failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::Truncated { .. }
                | Error::Manifest { .. }
                | Error::Load { .. }
                | Error::Bundle { .. }
                | Error::Corruption { .. }
        )
    }
}
