use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_activation, ActivationSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Semantic,
    Noise,
    Test,
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleKind::Semantic => "semantic",
            SampleKind::Noise => "noise",
            SampleKind::Test => "test",
        })
    }
}

impl std::str::FromStr for SampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(SampleKind::Semantic),
            "noise" => Ok(SampleKind::Noise),
            "test" => Ok(SampleKind::Test),
            other => Err(Error::Validation(format!("unknown sample kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub kind: SampleKind,
    /// Layer id → tensor file path, relative to the manifest's directory
    /// unless absolute.
    pub files: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub layer_ids: Vec<u32>,
    pub samples: Vec<ManifestSample>,
}

impl DatasetManifest {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.layer_ids.is_empty() {
            return Err("layer_ids is empty".into());
        }
        let mut seen_layers = HashSet::new();
        for l in &self.layer_ids {
            if !seen_layers.insert(*l) {
                return Err(format!("layer id {l} declared twice"));
            }
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(format!("duplicate sample id '{}'", s.id));
            }
            for l in &self.layer_ids {
                if !s.files.contains_key(l) {
                    return Err(format!("sample '{}' has no file for layer {l}", s.id));
                }
            }
            if let Some(extra) = s.files.keys().find(|l| !seen_layers.contains(*l)) {
                return Err(format!(
                    "sample '{}' lists undeclared layer {extra}",
                    s.id
                ));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    manifest.validate().map_err(|reason| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate().map_err(|reason| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    })?;
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One sample with its activations at every declared layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub kind: SampleKind,
    pub layers: BTreeMap<u32, ActivationSequence>,
}

impl Sample {
    pub fn layer(&self, layer_id: u32) -> Result<&ActivationSequence> {
        self.layers.get(&layer_id).ok_or_else(|| Error::Coverage {
            sample_id: self.id.clone(),
            layer: layer_id,
        })
    }
}

/// Samples in manifest order, all covering the same layer set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    layer_ids: Vec<u32>,
    samples: Vec<Sample>,
}

impl ActivationDataset {
    pub fn new(layer_ids: Vec<u32>, samples: Vec<Sample>) -> Result<Self> {
        if layer_ids.is_empty() {
            return Err(Error::Validation("dataset declares no layers".into()));
        }
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id '{}'", s.id)));
            }
        }
        for &layer in &layer_ids {
            let mut width: Option<(usize, &str)> = None;
            for s in &samples {
                let seq = s.layer(layer)?;
                match width {
                    None => width = Some((seq.dims(), &s.id)),
                    Some((d, first)) if d != seq.dims() => {
                        return Err(Error::Shape(format!(
                            "layer {layer}: sample '{first}' has d={d} but '{}' has d={}",
                            s.id,
                            seq.dims()
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { layer_ids, samples })
    }

    pub fn layer_ids(&self) -> &[u32] {
        &self.layer_ids
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn samples_of(&self, kind: SampleKind) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.kind == kind)
    }

    pub fn count(&self, kind: SampleKind) -> usize {
        self.samples_of(kind).count()
    }

    /// Hidden width at `layer`, if any sample is present.
    pub fn layer_dims(&self, layer: u32) -> Option<usize> {
        self.samples
            .first()
            .and_then(|s| s.layers.get(&layer))
            .map(ActivationSequence::dims)
    }
}

pub(crate) fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every tensor referenced by the manifest at `manifest_path`.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<ActivationDataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let samples = manifest
        .samples
        .par_iter()
        .map(|ms| {
            let layers = manifest
                .layer_ids
                .iter()
                .map(|&layer| {
                    let path = resolve(base, &ms.files[&layer]);
                    read_activation(&path)
                        .map(|seq| (layer, seq.with_layer_id(layer)))
                        .map_err(|e| Error::Load {
                            sample_id: ms.id.clone(),
                            layer,
                            reason: e.to_string(),
                        })
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(Sample {
                id: ms.id.clone(),
                kind: ms.kind,
                layers,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = ActivationDataset::new(manifest.layer_ids, samples)?;
    log::info!(
        "loaded {} samples ({} semantic, {} noise, {} test) from {}",
        dataset.samples.len(),
        dataset.count(SampleKind::Semantic),
        dataset.count(SampleKind::Noise),
        dataset.count(SampleKind::Test),
        manifest_path.display()
    );
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::write_activation;
    use nalgebra::DMatrix;

    fn write_sample(dir: &Path, id: &str, layers: &[(u32, usize)]) -> BTreeMap<u32, String> {
        let mut files = BTreeMap::new();
        for &(layer, d) in layers {
            let name = format!("{id}_l{layer}.see");
            let m = DMatrix::from_fn(2, d, |r, c| (r * d + c) as f64 + layer as f64);
            write_activation(&ActivationSequence::new(layer, m).unwrap(), dir.join(&name))
                .unwrap();
            files.insert(layer, name);
        }
        files
    }

    fn manifest_with(dir: &Path, widths: &[(&str, SampleKind, usize)]) -> PathBuf {
        let samples = widths
            .iter()
            .map(|&(id, kind, d1)| ManifestSample {
                id: id.into(),
                kind,
                files: write_sample(dir, id, &[(0, 4), (1, d1)]),
            })
            .collect();
        let manifest = DatasetManifest {
            layer_ids: vec![0, 1],
            samples,
        };
        let path = dir.join("manifest.json");
        write_manifest(&manifest, &path).unwrap();
        path
    }

    #[test]
    fn loads_counts_and_layers() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_with(
            dir.path(),
            &[
                ("s0", SampleKind::Semantic, 8),
                ("s1", SampleKind::Semantic, 8),
                ("n0", SampleKind::Noise, 8),
                ("n1", SampleKind::Noise, 8),
            ],
        );
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.count(SampleKind::Semantic), 2);
        assert_eq!(ds.count(SampleKind::Noise), 2);
        assert_eq!(ds.layer_dims(1), Some(8));
        let s1 = &ds.samples()[1];
        assert_eq!(s1.id, "s1");
        assert_eq!(s1.layers[&1].layer_id(), 1);
    }

    #[test]
    fn inconsistent_width_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_with(
            dir.path(),
            &[
                ("s0", SampleKind::Semantic, 8),
                ("n0", SampleKind::Noise, 16),
            ],
        );
        assert!(matches!(load_dataset(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_file_names_sample_and_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_with(dir.path(), &[("s0", SampleKind::Semantic, 8)]);
        fs::remove_file(dir.path().join("s0_l1.see")).unwrap();
        match load_dataset(&path).unwrap_err() {
            Error::Load {
                sample_id, layer, ..
            } => {
                assert_eq!(sample_id, "s0");
                assert_eq!(layer, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_schema_checks() {
        let ok = r#"{"layer_ids":[3],"samples":[{"id":"a","kind":"test","files":{"3":"a.see"}}]}"#;
        let m: DatasetManifest = serde_json::from_str(ok).unwrap();
        assert!(m.validate().is_ok());
        assert_eq!(m.samples[0].files[&3], "a.see");

        let missing = r#"{"layer_ids":[3,4],"samples":[{"id":"a","kind":"test","files":{"3":"a.see"}}]}"#;
        let m: DatasetManifest = serde_json::from_str(missing).unwrap();
        assert!(m.validate().is_err());

        let dup = r#"{"layer_ids":[3],"samples":[
            {"id":"a","kind":"test","files":{"3":"a.see"}},
            {"id":"a","kind":"noise","files":{"3":"b.see"}}]}"#;
        let m: DatasetManifest = serde_json::from_str(dup).unwrap();
        assert!(m.validate().unwrap_err().contains("duplicate"));

        let bad_kind = r#"{"layer_ids":[3],"samples":[{"id":"a","kind":"clean","files":{"3":"a.see"}}]}"#;
        assert!(serde_json::from_str::<DatasetManifest>(bad_kind).is_err());
    }
}
