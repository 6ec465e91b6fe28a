//! Noise-subspace calibration: pooling, per-layer discrepancy, layer
//! localization and noise-basis extraction.
//!
//! Given aligned semantic and noise activation sets, every layer gets a
//! magnitude `M` (Frobenius norm of the pooled difference) and a direction
//! consistency `D` (absolute cosine between the flattened pooled matrices).
//! The first layer exceeding both layer-wise means opens the retained suffix
//! of layers. For each retained layer the dominant right singular vectors of
//! the noise matrix that are nearly orthogonal to every dominant semantic
//! direction form the noise basis `Q`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{flat_dot, thin_svd_right};
use crate::tensor_io::{ActivationDataset, ActivationSequence, NoiseBasisBundle, Provenance, SampleKind};

/// How dominant singular directions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvMode {
    /// Keep directions with `σ > α`.
    Absolute(f64),
    /// Keep the shortest descending prefix holding at least `ρ` of `Σσ²`.
    EnergyRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    /// Cosine threshold below which a noise direction counts as noise-only.
    pub delta: f64,
    pub sv_mode: SvMode,
    pub epsilon: f64,
    /// Fall back to `argmax M` when no layer exceeds both means.
    #[serde(default)]
    pub fallback_argmax: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            sv_mode: SvMode::EnergyRatio(0.95),
            epsilon: 1e-8,
            fallback_argmax: false,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1], got {}", self.delta)));
        }
        match self.sv_mode {
            SvMode::Absolute(alpha) if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
            }
            SvMode::EnergyRatio(rho) if !(rho > 0.0 && rho <= 1.0) => {
                return Err(Error::Config(format!("energy ratio must be in (0, 1], got {rho}")));
            }
            _ => {}
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer_id: u32,
    /// `‖S − N‖_F`
    pub magnitude: f64,
    /// `|vec(S)ᵀvec(N)| / (‖S‖‖N‖ + ε)`, in `[0, 1]`
    pub direction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub selected: Vec<u32>,
    pub mean_magnitude: f64,
    pub mean_direction: f64,
    pub used_fallback: bool,
}

/// Mean over the time axis.
pub fn pool_activations(seq: &ActivationSequence) -> DVector<f64> {
    let a = seq.data();
    let t = a.nrows() as f64;
    DVector::from_iterator(
        a.ncols(),
        a.column_iter().map(|col| col.iter().sum::<f64>() / t),
    )
}

/// Pooled vectors of every `kind` sample at `layer`, one row per sample in
/// manifest order.
pub fn stack_pooled(dataset: &ActivationDataset, kind: SampleKind, layer: u32) -> Result<DMatrix<f64>> {
    let pooled = dataset
        .samples_of(kind)
        .map(|s| s.layer(layer).map(pool_activations))
        .collect::<Result<Vec<_>>>()?;
    if pooled.is_empty() {
        return Err(Error::EmptySet {
            kind: kind.to_string(),
        });
    }
    let d = pooled[0].len();
    Ok(DMatrix::from_fn(pooled.len(), d, |r, c| pooled[r][c]))
}

fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn layer_discrepancy(
    layer_id: u32,
    semantic: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    epsilon: f64,
) -> Result<LayerDiagnostics> {
    if semantic.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "layer {layer_id}: semantic {:?} vs noise {:?}",
            semantic.shape(),
            noise.shape()
        )));
    }
    if semantic.nrows() == 0 {
        return Err(Error::Shape(format!("layer {layer_id}: no rows")));
    }
    let magnitude = semantic
        .iter()
        .zip(noise.iter())
        .map(|(s, n)| (s - n) * (s - n))
        .sum::<f64>()
        .sqrt();
    let cross = flat_dot(semantic, noise).abs();
    let direction = (cross / (frobenius(semantic) * frobenius(noise) + epsilon)).min(1.0);
    Ok(LayerDiagnostics {
        layer_id,
        magnitude,
        direction,
    })
}

/// Picks the first layer whose magnitude and direction both strictly exceed
/// their means over all layers, and returns it with every later layer.
pub fn locate_noise_layers(diags: &[LayerDiagnostics], fallback_argmax: bool) -> Result<Localization> {
    if diags.is_empty() {
        return Err(Error::Validation("no layer diagnostics".into()));
    }
    if diags.windows(2).any(|w| w[0].layer_id >= w[1].layer_id) {
        return Err(Error::Validation("diagnostics must be sorted by ascending layer id".into()));
    }
    let count = diags.len() as f64;
    let mean_magnitude = diags.iter().map(|d| d.magnitude).sum::<f64>() / count;
    let mean_direction = diags.iter().map(|d| d.direction).sum::<f64>() / count;

    let start = diags
        .iter()
        .position(|d| d.magnitude > mean_magnitude && d.direction > mean_direction);
    let (start, used_fallback) = match start {
        Some(i) => (i, false),
        None if fallback_argmax => {
            let mut best = 0;
            for (i, d) in diags.iter().enumerate() {
                if d.magnitude > diags[best].magnitude {
                    best = i;
                }
            }
            log::warn!(
                "no layer exceeds both means; falling back to argmax magnitude at layer {}",
                diags[best].layer_id
            );
            (best, true)
        }
        None => {
            return Err(Error::Localization {
                diagnostics: diags.to_vec(),
                mean_magnitude,
                mean_direction,
            })
        }
    };
    Ok(Localization {
        selected: diags[start..].iter().map(|d| d.layer_id).collect(),
        mean_magnitude,
        mean_direction,
        used_fallback,
    })
}

/// Number of leading (descending) singular values treated as dominant.
///
/// Values at or below the numerical-rank floor `σ₁·max(m, d)·ε_mach` never
/// count: their singular vectors are arbitrary.
pub(crate) fn dominant_count(sv: &[f64], shape: (usize, usize), mode: SvMode) -> usize {
    let Some(&top) = sv.first() else { return 0 };
    let floor = top * shape.0.max(shape.1) as f64 * f64::EPSILON;
    let nonzero = sv.iter().take_while(|&&s| s > floor).count();
    match mode {
        SvMode::Absolute(alpha) => sv[..nonzero].iter().take_while(|&&s| s > alpha).count(),
        SvMode::EnergyRatio(rho) => {
            let total: f64 = sv[..nonzero].iter().map(|s| s * s).sum();
            let target = rho * total;
            let mut acc = 0.0;
            for (i, s) in sv[..nonzero].iter().enumerate() {
                acc += s * s;
                if acc >= target {
                    return i + 1;
                }
            }
            nonzero
        }
    }
}

/// Result of noise-basis extraction for one layer.
#[derive(Debug, Clone)]
pub struct BasisExtraction {
    /// `d × r`, orthonormal columns in descending noise-σ order.
    pub basis: DMatrix<f64>,
    /// Indices (into the descending noise directions) that were kept.
    pub retained: Vec<usize>,
    /// `max_k |cos(v_j^n, v_k^s)|` for every dominant noise direction `j`.
    pub max_cos: Vec<f64>,
    pub semantic_dominant: usize,
    pub noise_singular_values: Vec<f64>,
}

impl BasisExtraction {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.ncols() == 0
    }
}

fn column_cos(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let (x, y) = (a.column(i), b.column(j));
    x.dot(&y) / (x.norm() * y.norm())
}

pub fn extract_noise_basis(
    semantic: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    config: &CalibConfig,
) -> Result<BasisExtraction> {
    config.validate()?;
    if semantic.ncols() != noise.ncols() {
        return Err(Error::Shape(format!(
            "semantic width {} vs noise width {}",
            semantic.ncols(),
            noise.ncols()
        )));
    }
    if noise.nrows() == 0 || semantic.nrows() == 0 || noise.ncols() == 0 {
        return Err(Error::Shape("empty calibration matrix".into()));
    }
    if noise.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("noise matrix is all zero".into()));
    }

    let sem = thin_svd_right(semantic);
    let noi = thin_svd_right(noise);
    let sem_dom = dominant_count(&sem.singular_values, semantic.shape(), config.sv_mode);
    let noi_dom = dominant_count(&noi.singular_values, noise.shape(), config.sv_mode);

    let max_cos: Vec<f64> = (0..noi_dom)
        .map(|j| {
            (0..sem_dom)
                .map(|k| column_cos(&noi.right_vectors, j, &sem.right_vectors, k).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let retained: Vec<usize> = (0..noi_dom).filter(|&j| max_cos[j] < config.delta).collect();

    let d = noise.ncols();
    let mut basis = DMatrix::zeros(d, retained.len());
    for (dst, &j) in retained.iter().enumerate() {
        basis.set_column(dst, &noi.right_vectors.column(j));
    }
    if retained.is_empty() {
        log::warn!(
            "no noise direction is orthogonal enough to the {sem_dom} semantic directions (delta {}); basis is empty",
            config.delta
        );
    }
    Ok(BasisExtraction {
        basis,
        retained,
        max_cos,
        semantic_dominant: sem_dom,
        noise_singular_values: noi.singular_values,
    })
}

/// Everything calibration produced, including the per-layer diagnostics.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub bundle: NoiseBasisBundle,
    pub diagnostics: Vec<LayerDiagnostics>,
    pub localization: Localization,
}

pub fn calibrate(dataset: &ActivationDataset, config: &CalibConfig) -> Result<Calibration> {
    config.validate()?;
    let semantic = dataset.count(SampleKind::Semantic);
    let noise = dataset.count(SampleKind::Noise);
    if semantic != noise {
        return Err(Error::Pairing { semantic, noise });
    }
    if semantic < 2 {
        return Err(Error::EmptySet {
            kind: format!("paired (need at least 2, have {semantic})"),
        });
    }

    let mut layers = dataset.layer_ids().to_vec();
    layers.sort_unstable();

    let stacked = layers
        .par_iter()
        .map(|&l| {
            Ok((
                stack_pooled(dataset, SampleKind::Semantic, l)?,
                stack_pooled(dataset, SampleKind::Noise, l)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let diagnostics = layers
        .iter()
        .zip(&stacked)
        .map(|(&l, (s, n))| layer_discrepancy(l, s, n, config.epsilon))
        .collect::<Result<Vec<_>>>()?;
    let localization = locate_noise_layers(&diagnostics, config.fallback_argmax)?;

    let bases = localization
        .selected
        .par_iter()
        .map(|l| {
            let idx = layers.binary_search(l).expect("selected layer exists");
            let (s, n) = &stacked[idx];
            extract_noise_basis(s, n, config).map(|e| (*l, e.basis))
        })
        .collect::<Result<Vec<_>>>()?;

    let digest = calibration_digest(config, &layers, &stacked);
    let bundle = NoiseBasisBundle::new(
        bases.into_iter().collect(),
        localization.selected.clone(),
        *config,
        Provenance {
            sample_count: semantic,
            digest,
        },
    )?;
    Ok(Calibration {
        bundle,
        diagnostics,
        localization,
    })
}

/// SHA-256 over the config and the pooled calibration matrices.
fn calibration_digest(config: &CalibConfig, layers: &[u32], stacked: &[(DMatrix<f64>, DMatrix<f64>)]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for (l, (s, n)) in layers.iter().zip(stacked) {
        h.update(l.to_le_bytes());
        for m in [s, n] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
