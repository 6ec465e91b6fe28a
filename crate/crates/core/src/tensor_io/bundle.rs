use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{read_tensor, write_tensor};
use crate::calibrate::{CalibConfig, SvMode};
use crate::error::{Error, Result};
use crate::linalg::orthonormality_deviation;

pub const BUNDLE_FILE: &str = "bundle.json";

/// Orthonormality tolerance enforced when a bundle is built in memory.
const BUILD_TOLERANCE: f64 = 1e-6;
/// Looser tolerance for bases read back from 32-bit storage.
const LOAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_count: usize,
    pub digest: String,
}

/// Calibrated noise bases for the retained layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBasisBundle {
    bases: BTreeMap<u32, DMatrix<f64>>,
    selected_layers: Vec<u32>,
    config: CalibConfig,
    provenance: Provenance,
}

impl NoiseBasisBundle {
    pub fn new(
        bases: BTreeMap<u32, DMatrix<f64>>,
        selected_layers: Vec<u32>,
        config: CalibConfig,
        provenance: Provenance,
    ) -> Result<Self> {
        Self::build(bases, selected_layers, config, provenance, BUILD_TOLERANCE)
    }

    fn build(
        bases: BTreeMap<u32, DMatrix<f64>>,
        selected_layers: Vec<u32>,
        config: CalibConfig,
        provenance: Provenance,
        tolerance: f64,
    ) -> Result<Self> {
        config.validate()?;
        if selected_layers.is_empty() {
            return Err(Error::Validation("bundle selects no layers".into()));
        }
        if selected_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "selected layers must be strictly ascending: {selected_layers:?}"
            )));
        }
        if !bases.keys().copied().eq(selected_layers.iter().copied()) {
            return Err(Error::Validation(format!(
                "basis layers {:?} differ from selected layers {selected_layers:?}",
                bases.keys().collect::<Vec<_>>()
            )));
        }
        for (&layer, q) in &bases {
            if q.nrows() == 0 {
                return Err(Error::Validation(format!("layer {layer}: basis has zero rows")));
            }
            if q.ncols() > q.nrows() {
                return Err(Error::Validation(format!(
                    "layer {layer}: rank {} exceeds width {}",
                    q.ncols(),
                    q.nrows()
                )));
            }
            let deviation = orthonormality_deviation(q);
            if deviation.is_nan() || deviation > tolerance {
                return Err(Error::Corruption { layer, deviation });
            }
        }
        Ok(Self {
            bases,
            selected_layers,
            config,
            provenance,
        })
    }

    pub fn selected_layers(&self) -> &[u32] {
        &self.selected_layers
    }

    pub fn basis(&self, layer: u32) -> Option<&DMatrix<f64>> {
        self.bases.get(&layer)
    }

    pub fn bases(&self) -> &BTreeMap<u32, DMatrix<f64>> {
        &self.bases
    }

    pub fn rank(&self, layer: u32) -> Option<usize> {
        self.bases.get(&layer).map(DMatrix::ncols)
    }

    pub fn config(&self) -> &CalibConfig {
        &self.config
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    selected_layers: Vec<u32>,
    delta: f64,
    sv_mode: SvMode,
    epsilon: f64,
    #[serde(default)]
    fallback_argmax: bool,
    ranks: BTreeMap<u32, usize>,
    dims: BTreeMap<u32, usize>,
    sample_count: usize,
    digest: String,
}

fn basis_file(layer: u32) -> String {
    format!("Q_{layer}.see")
}

/// Writes `bundle.json` and one `Q_<layer>.see` per retained layer into `dir`,
/// creating it if needed.
pub fn save_bundle(bundle: &NoiseBasisBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (&layer, q) in &bundle.bases {
        write_tensor(q, dir.join(basis_file(layer)))?;
    }
    let file = BundleFile {
        selected_layers: bundle.selected_layers.clone(),
        delta: bundle.config.delta,
        sv_mode: bundle.config.sv_mode,
        epsilon: bundle.config.epsilon,
        fallback_argmax: bundle.config.fallback_argmax,
        ranks: bundle.bases.iter().map(|(&l, q)| (l, q.ncols())).collect(),
        dims: bundle.bases.iter().map(|(&l, q)| (l, q.nrows())).collect(),
        sample_count: bundle.provenance.sample_count,
        digest: bundle.provenance.digest.clone(),
    };
    let path = dir.join(BUNDLE_FILE);
    let mut text = serde_json::to_string_pretty(&file).expect("bundle serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<NoiseBasisBundle> {
    let dir = dir.as_ref();
    let path = dir.join(BUNDLE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bundle_err = |reason: String| Error::Bundle {
        path: path.clone(),
        reason,
    };
    let file: BundleFile = serde_json::from_str(&text).map_err(|e| bundle_err(e.to_string()))?;

    let mut bases = BTreeMap::new();
    for &layer in &file.selected_layers {
        let q = read_tensor(dir.join(basis_file(layer)))?;
        let rank = file.ranks.get(&layer).copied();
        let dims = file.dims.get(&layer).copied();
        if rank != Some(q.ncols()) || dims != Some(q.nrows()) {
            return Err(bundle_err(format!(
                "layer {layer}: file holds {}x{}, bundle.json declares {:?}x{:?}",
                q.nrows(),
                q.ncols(),
                dims,
                rank
            )));
        }
        bases.insert(layer, q);
    }
    if file.ranks.len() != bases.len() {
        return Err(bundle_err("ranks list layers that are not selected".into()));
    }
    let config = CalibConfig {
        delta: file.delta,
        sv_mode: file.sv_mode,
        epsilon: file.epsilon,
        fallback_argmax: file.fallback_argmax,
    };
    NoiseBasisBundle::build(
        bases,
        file.selected_layers,
        config,
        Provenance {
            sample_count: file.sample_count,
            digest: file.digest,
        },
        LOAD_TOLERANCE,
    )
    .map_err(|e| match e {
        Error::Corruption { .. } => e,
        other => bundle_err(other.to_string()),
    })
}
