//! Neutralization: subtract the noise-subspace component of activations.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::see::project_onto_noise;
use crate::tensor_io::{ActivationSequence, NoiseBasisBundle, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeutralizeConfig {
    /// Removal strength in `[0, 1]`.
    pub lambda: f64,
}

impl Default for NeutralizeConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl NeutralizeConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let cfg = Self { lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `C = A·Q·Qᵀ`
pub fn reconstruct_noise_component(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(project_onto_noise(a, q)? * q.transpose())
}

/// `Ã = A − λ·C`
pub fn neutralize(a: &DMatrix<f64>, q: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    NeutralizeConfig { lambda }.validate()?;
    let c = reconstruct_noise_component(a, q)?;
    if lambda == 0.0 {
        return Ok(a.clone());
    }
    Ok(a - c * lambda)
}

/// Neutralizes every retained layer of `sample`; other layers pass through.
pub fn neutralize_sample(
    sample: &Sample,
    bundle: &NoiseBasisBundle,
    config: &NeutralizeConfig,
) -> Result<Sample> {
    config.validate()?;
    for &layer in bundle.selected_layers() {
        sample.layer(layer)?;
    }
    let layers = sample
        .layers
        .iter()
        .map(|(&layer, seq)| {
            let out = match bundle.basis(layer) {
                Some(q) => {
                    let data = neutralize(seq.data(), q, config.lambda)?;
                    ActivationSequence::new(layer, data)?
                }
                None => seq.clone(),
            };
            Ok((layer, out))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Sample {
        id: sample.id.clone(),
        kind: sample.kind,
        layers,
    })
}

pub fn neutralize_samples<'a, I>(
    samples: I,
    bundle: &NoiseBasisBundle,
    config: &NeutralizeConfig,
) -> Result<Vec<Sample>>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let samples: Vec<&Sample> = samples.into_iter().collect();
    samples
        .par_iter()
        .map(|s| neutralize_sample(s, bundle, config))
        .collect()
}
