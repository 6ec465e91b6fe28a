//! Signal embedding energy: the mean fraction of per-frame activation
//! energy that falls inside the calibrated noise subspace.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_io::{NoiseBasisBundle, Sample};

pub const AGGREGATE_TAG: &str = "AGG";

#[derive(Debug, Clone, PartialEq)]
pub struct SeeScore {
    pub sample_id: String,
    pub per_layer: BTreeMap<u32, f64>,
    pub aggregate: f64,
    /// Multiplier applied when the score is reported; never during scoring.
    pub scale: f64,
}

impl SeeScore {
    pub fn scaled_aggregate(&self) -> f64 {
        self.aggregate * self.scale
    }
}

fn check_compat(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != q.nrows() {
        return Err(Error::Shape(format!(
            "activations have width {} but basis has {} rows",
            a.ncols(),
            q.nrows()
        )));
    }
    Ok(())
}

/// `Z = A·Q`, one row of noise-subspace coordinates per frame.
pub fn project_onto_noise(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_compat(a, q)?;
    Ok(a * q)
}

/// `(1/T) Σ_t ‖Z_t‖² / (‖A_t‖² + ε)`
pub fn layer_see(a: &DMatrix<f64>, q: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    let z = project_onto_noise(a, q)?;
    if a.nrows() == 0 {
        return Err(Error::Shape("activations have no frames".into()));
    }
    let mut ratios: Vec<f64> = (0..a.nrows())
        .map(|t| {
            let captured: f64 = z.row(t).iter().map(|v| v * v).sum();
            let energy: f64 = a.row(t).iter().map(|v| v * v).sum();
            captured / (energy + epsilon)
        })
        .collect();
    // Summing in value order makes the mean independent of frame order.
    ratios.sort_by(f64::total_cmp);
    Ok(ratios.iter().sum::<f64>() / a.nrows() as f64)
}

/// Scores one sample against every retained layer of `bundle`; the aggregate
/// is the unweighted mean, with empty-basis layers contributing zero.
pub fn see_score(sample: &Sample, bundle: &NoiseBasisBundle) -> Result<SeeScore> {
    let mut per_layer = BTreeMap::new();
    for &layer in bundle.selected_layers() {
        let seq = sample.layer(layer)?;
        let q = bundle.basis(layer).expect("bundle covers its selected layers");
        let value = layer_see(seq.data(), q, bundle.epsilon()).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("sample '{}' layer {layer}: {msg}", sample.id)),
            other => other,
        })?;
        per_layer.insert(layer, value);
    }
    let aggregate = per_layer.values().sum::<f64>() / per_layer.len() as f64;
    Ok(SeeScore {
        sample_id: sample.id.clone(),
        per_layer,
        aggregate,
        scale: 1.0,
    })
}

/// Scores samples in parallel; output order follows input order.
pub fn score_samples<'a, I>(samples: I, bundle: &NoiseBasisBundle) -> Result<Vec<SeeScore>>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let samples: Vec<&Sample> = samples.into_iter().collect();
    samples.par_iter().map(|s| see_score(s, bundle)).collect()
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders the score CSV: each sample's per-layer rows followed by its
/// aggregate row, all values multiplied by the score's `scale`.
pub fn format_scores_csv(scores: &[SeeScore]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Validation(format!("csv encoding failed: {e}"));
    w.write_record(["sample_id", "layer_id", "see_layer"]).map_err(to_err)?;
    for s in scores {
        for (layer, v) in &s.per_layer {
            w.write_record([s.sample_id.as_str(), &layer.to_string(), &format_float(v * s.scale)])
                .map_err(to_err)?;
        }
        w.write_record([s.sample_id.as_str(), AGGREGATE_TAG, &format_float(s.scaled_aggregate())])
            .map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_scores_csv(scores: &[SeeScore], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_scores_csv(scores)?).map_err(|e| Error::io(path, e))
}

/// Parses a score CSV back into scores (values as written, scale 1).
pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<SeeScore>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["sample_id", "layer_id", "see_layer"] {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut order: Vec<String> = Vec::new();
    let mut layers: BTreeMap<String, BTreeMap<u32, f64>> = BTreeMap::new();
    let mut aggregates: BTreeMap<String, f64> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let id = rec[0].to_string();
        let value: f64 = rec[2]
            .parse()
            .map_err(|_| bad(format!("bad value '{}' for '{id}'", &rec[2])))?;
        if !layers.contains_key(&id) {
            order.push(id.clone());
            layers.insert(id.clone(), BTreeMap::new());
        }
        if &rec[1] == AGGREGATE_TAG {
            aggregates.insert(id, value);
        } else {
            let layer: u32 = rec[1]
                .parse()
                .map_err(|_| bad(format!("bad layer '{}' for '{id}'", &rec[1])))?;
            layers.get_mut(&id).unwrap().insert(layer, value);
        }
    }
    order
        .into_iter()
        .map(|id| {
            let aggregate = *aggregates
                .get(&id)
                .ok_or_else(|| bad(format!("sample '{id}' has no {AGGREGATE_TAG} row")))?;
            Ok(SeeScore {
                per_layer: layers.remove(&id).unwrap(),
                sample_id: id,
                aggregate,
                scale: 1.0,
            })
        })
        .collect()
}
