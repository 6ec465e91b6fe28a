//! Synthetic activation datasets with planted semantic and noise subspaces.
//!
//! Every sample is a latent frame sequence rendered into each layer:
//!
//! * semantic content lives in `span(semantic_basis)` and is normalized to
//!   unit RMS frame norm;
//! * noise content lives in `span(noise_basis)`, is normalized the same way
//!   and scaled by `10^(-snr_db / 20)`, and only appears at layers at or
//!   after the noise onset layer;
//! * every entry gets independent uniform jitter in `[-jitter, jitter]`.
//!
//! Calibration pairs share one noise draw: the noise sample carries it at
//! the 0 dB reference level, and the semantic sample carries a faint copy at
//! `environment_snr_db`, as clean requests captured in the same environment
//! would. That shared trace is what makes noisy layers stand out in the
//! direction-consistency diagnostic.
//!
//! All randomness comes from `ChaCha8` streams keyed by `(seed, stream)`, so
//! samples can be generated in any order or in parallel.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::orthonormality_deviation;
use crate::tensor_io::{
    write_activation, write_manifest, write_tensor, ActivationDataset, ActivationSequence,
    DatasetManifest, ManifestSample, Sample, SampleKind,
};

/// SNR levels in dB used for sweeps unless overridden.
pub const DEFAULT_SNR_GRID: [f64; 7] = [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0, 30.0];

const STREAM_BASIS: u64 = 0;
const STREAM_CALIBRATION: u64 = 1 << 32;
const STREAM_TEST: u64 = 2 << 32;
const STREAM_OUTCOME: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub dims: usize,
    pub num_layers: usize,
    pub semantic_rank: usize,
    pub noise_rank: usize,
    /// First (1-based) layer carrying noise energy.
    pub noise_onset_layer: usize,
    /// Calibration pairs: this many semantic and this many noise samples.
    pub samples_per_kind: usize,
    pub frames: usize,
    pub snr_grid_db: Vec<f64>,
    /// Mixed test samples per SNR level.
    pub tests_per_level: usize,
    /// Level of the paired-noise trace inside calibration semantic samples.
    /// `inf` disables it.
    pub environment_snr_db: f64,
    /// Rotation (radians) of the first noise direction toward the first
    /// semantic direction. Zero keeps the subspaces orthogonal.
    pub overlap_angle: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: 64,
            num_layers: 8,
            semantic_rank: 4,
            noise_rank: 3,
            noise_onset_layer: 5,
            samples_per_kind: 50,
            frames: 32,
            snr_grid_db: DEFAULT_SNR_GRID.to_vec(),
            tests_per_level: 20,
            environment_snr_db: 20.0,
            overlap_angle: 0.0,
            jitter: 1e-3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.semantic_rank + self.noise_rank > self.dims {
            return Err(Error::Rank {
                semantic: self.semantic_rank,
                noise: self.noise_rank,
                dims: self.dims,
            });
        }
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.semantic_rank == 0 || self.noise_rank == 0 {
            return fail("semantic and noise ranks must be at least 1".into());
        }
        if self.num_layers == 0 || !(1..=self.num_layers).contains(&self.noise_onset_layer) {
            return fail(format!(
                "noise onset layer {} outside 1..={}",
                self.noise_onset_layer, self.num_layers
            ));
        }
        if self.samples_per_kind < 2 {
            return fail("need at least 2 samples per kind".into());
        }
        if self.frames == 0 {
            return fail("need at least 1 frame".into());
        }
        if self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return fail("SNR levels must be finite".into());
        }
        if self.environment_snr_db.is_nan() {
            return fail("environment SNR is NaN".into());
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.overlap_angle) {
            return fail(format!("overlap angle {} outside [0, π/2]", self.overlap_angle));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(format!("jitter must be non-negative, got {}", self.jitter));
        }
        Ok(())
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        (1..=self.num_layers as u32).collect()
    }
}

/// Amplitude factor for a level in dB: `10^(-snr_db / 20)`.
pub fn snr_amplitude(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

/// Condition id used for a sweep level, e.g. `snr-10`.
pub fn condition_id(snr_db: f64) -> String {
    format!("snr{snr_db}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub semantic_basis: DMatrix<f64>,
    pub noise_basis: DMatrix<f64>,
    pub layer_ids: Vec<u32>,
    pub semantic_gains: Vec<f64>,
    pub noise_gains: Vec<f64>,
    pub jitter: f64,
}

impl GroundTruth {
    pub fn dims(&self) -> usize {
        self.semantic_basis.nrows()
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Modified Gram–Schmidt with one re-orthogonalization pass.
fn orthonormalize(m: &mut DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for _ in 0..2 {
            for k in 0..j {
                let proj = m.column(k).dot(&m.column(j));
                let qk = m.column(k).clone_owned();
                m.column_mut(j).axpy(-proj, &qk, 1.0);
            }
        }
        let norm = m.column(j).norm();
        if norm < 1e-12 {
            return Err(Error::Degenerate("random basis draw is rank deficient".into()));
        }
        m.column_mut(j).unscale_mut(norm);
    }
    Ok(())
}

pub fn plant_subspaces(spec: &SynthSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let (d, ks, kn) = (spec.dims, spec.semantic_rank, spec.noise_rank);
    let mut rng = stream_rng(spec.seed, STREAM_BASIS);
    let mut joint = DMatrix::from_fn(d, ks + kn, |_, _| rng.sample::<f64, _>(StandardNormal));
    orthonormalize(&mut joint)?;
    let semantic_basis = joint.columns(0, ks).clone_owned();
    let mut noise_basis = joint.columns(ks, kn).clone_owned();
    if spec.overlap_angle > 0.0 {
        let (s, c) = spec.overlap_angle.sin_cos();
        let tilted = noise_basis.column(0) * c + semantic_basis.column(0) * s;
        noise_basis.set_column(0, &tilted);
    }
    let onset = spec.noise_onset_layer;
    Ok(GroundTruth {
        semantic_basis,
        noise_basis,
        layer_ids: spec.layer_ids(),
        semantic_gains: vec![1.0; spec.num_layers],
        noise_gains: (1..=spec.num_layers)
            .map(|l| if l >= onset { 1.0 } else { 0.0 })
            .collect(),
        jitter: spec.jitter,
    })
}

/// `T × d` frames in `span(basis)` with a per-sample offset plus per-frame
/// variation, scaled to unit RMS frame norm.
pub fn draw_content<R: Rng>(basis: &DMatrix<f64>, frames: usize, rng: &mut R) -> DMatrix<f64> {
    let k = basis.ncols();
    let offset: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let coef = DMatrix::from_fn(frames, k, |_, c| offset[c] + rng.sample::<f64, _>(StandardNormal));
    let mut x = coef * basis.transpose();
    let rms = rms_frame_norm(&x);
    if rms > 0.0 {
        x.unscale_mut(rms);
    }
    x
}

/// `sqrt(mean_t ‖x_t‖²)`
pub fn rms_frame_norm(x: &DMatrix<f64>) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64).sqrt()
}

fn render<R: Rng>(
    truth: &GroundTruth,
    semantic: Option<&DMatrix<f64>>,
    noise: Option<(&DMatrix<f64>, f64)>,
    frames: usize,
    rng: &mut R,
) -> Vec<ActivationSequence> {
    let d = truth.dims();
    truth
        .layer_ids
        .iter()
        .enumerate()
        .map(|(i, &layer)| {
            let mut x = DMatrix::zeros(frames, d);
            if let Some(s) = semantic {
                x += s * truth.semantic_gains[i];
            }
            if let Some((n, amp)) = noise {
                let g = truth.noise_gains[i] * amp;
                if g != 0.0 {
                    x += n * g;
                }
            }
            if truth.jitter > 0.0 {
                let j = truth.jitter;
                x.iter_mut().for_each(|v| *v += rng.random_range(-j..=j));
            }
            ActivationSequence::new(layer, x).expect("synthetic activations are finite")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Semantic,
    Noise,
    Mixed,
}

/// One sample's activations at every layer of `truth`.
///
/// Draw order is fixed (semantic content, noise content, jitter) so that two
/// calls on identically seeded generators differ only through `snr_db`.
pub fn generate_sample<R: Rng>(
    truth: &GroundTruth,
    kind: SynthKind,
    snr_db: f64,
    frames: usize,
    rng: &mut R,
) -> Result<Vec<ActivationSequence>> {
    if frames == 0 {
        return Err(Error::Validation("need at least 1 frame".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Validation(format!("SNR must be finite, got {snr_db}")));
    }
    let semantic = draw_content(&truth.semantic_basis, frames, rng);
    let noise = draw_content(&truth.noise_basis, frames, rng);
    let amp = snr_amplitude(snr_db);
    Ok(match kind {
        SynthKind::Semantic => render(truth, Some(&semantic), None, frames, rng),
        SynthKind::Noise => render(truth, None, Some((&noise, amp)), frames, rng),
        SynthKind::Mixed => render(truth, Some(&semantic), Some((&noise, amp)), frames, rng),
    })
}

/// An aligned (semantic, noise) calibration pair sharing one noise draw.
pub fn generate_calibration_pair<R: Rng>(
    truth: &GroundTruth,
    environment_snr_db: f64,
    frames: usize,
    rng: &mut R,
) -> (Vec<ActivationSequence>, Vec<ActivationSequence>) {
    let semantic = draw_content(&truth.semantic_basis, frames, rng);
    let noise = draw_content(&truth.noise_basis, frames, rng);
    let trace = snr_amplitude(environment_snr_db);
    let clean = if trace > 0.0 {
        render(truth, Some(&semantic), Some((&noise, trace)), frames, rng)
    } else {
        render(truth, Some(&semantic), None, frames, rng)
    };
    let pure = render(truth, None, Some((&noise, 1.0)), frames, rng);
    (clean, pure)
}

/// `‖P_est − P_true‖_F` with `P = B·Bᵀ`.
pub fn subspace_recovery_error(estimated: &DMatrix<f64>, truth_noise: &DMatrix<f64>) -> Result<f64> {
    if estimated.nrows() != truth_noise.nrows() {
        return Err(Error::Shape(format!(
            "bases live in {} and {} dimensions",
            estimated.nrows(),
            truth_noise.nrows()
        )));
    }
    for (name, b) in [("estimated", estimated), ("truth", truth_noise)] {
        let dev = orthonormality_deviation(b);
        if dev > 1e-6 {
            return Err(Error::Validation(format!(
                "{name} basis is not orthonormal (deviation {dev:e})"
            )));
        }
    }
    let diff = estimated * estimated.transpose() - truth_noise * truth_noise.transpose();
    Ok(diff.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub snr_db: Option<f64>,
    pub condition: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub truth: GroundTruth,
    pub samples: Vec<SynthSample>,
}

fn to_sample(id: String, kind: SampleKind, layers: Vec<ActivationSequence>) -> Sample {
    Sample {
        id,
        kind,
        layers: layers.into_iter().map(|s| (s.layer_id(), s)).collect(),
    }
}

/// Calibration pairs (semantic samples first, then noise samples) followed
/// by `tests_per_level` mixed samples at every SNR level. Test sample `i`
/// reuses the same draws at every level.
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    let truth = plant_subspaces(spec)?;
    let pairs: Vec<_> = (0..spec.samples_per_kind)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(spec.seed, STREAM_CALIBRATION | i as u64);
            generate_calibration_pair(&truth, spec.environment_snr_db, spec.frames, &mut rng)
        })
        .collect();

    let mut samples = Vec::new();
    let mut noise_samples = Vec::with_capacity(pairs.len());
    for (i, (clean, pure)) in pairs.into_iter().enumerate() {
        samples.push(SynthSample {
            sample: to_sample(format!("sem_{i:04}"), SampleKind::Semantic, clean),
            snr_db: None,
            condition: None,
        });
        noise_samples.push(SynthSample {
            sample: to_sample(format!("noise_{i:04}"), SampleKind::Noise, pure),
            snr_db: None,
            condition: None,
        });
    }
    samples.extend(noise_samples);

    let jobs: Vec<(f64, usize)> = spec
        .snr_grid_db
        .iter()
        .flat_map(|&snr| (0..spec.tests_per_level).map(move |i| (snr, i)))
        .collect();
    let tests = jobs
        .par_iter()
        .map(|&(snr, i)| {
            let mut rng = stream_rng(spec.seed, STREAM_TEST | i as u64);
            let layers = generate_sample(&truth, SynthKind::Mixed, snr, spec.frames, &mut rng)?;
            let condition = condition_id(snr);
            Ok(SynthSample {
                sample: to_sample(format!("{condition}_{i:04}"), SampleKind::Test, layers),
                snr_db: Some(snr),
                condition: Some(condition),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    samples.extend(tests);

    Ok(SynthDataset {
        spec: spec.clone(),
        truth,
        samples,
    })
}

impl SynthDataset {
    pub fn to_activation_dataset(&self) -> Result<ActivationDataset> {
        ActivationDataset::new(
            self.spec.layer_ids(),
            self.samples.iter().map(|s| s.sample.clone()).collect(),
        )
    }

    /// Only the calibration pairs.
    pub fn calibration_dataset(&self) -> Result<ActivationDataset> {
        ActivationDataset::new(
            self.spec.layer_ids(),
            self.samples
                .iter()
                .filter(|s| s.sample.kind != SampleKind::Test)
                .map(|s| s.sample.clone())
                .collect(),
        )
    }

    pub fn tests(&self) -> impl Iterator<Item = &SynthSample> {
        self.samples.iter().filter(|s| s.sample.kind == SampleKind::Test)
    }
}

/// One outcome per SNR level, `1 − slope·amplitude + N(0, noise_sd²)`,
/// clamped to `[0, 1]`.
pub fn synthetic_outcomes(snr_grid_db: &[f64], slope: f64, noise_sd: f64, seed: u64) -> Vec<(String, f64)> {
    let mut rng = stream_rng(seed, STREAM_OUTCOME);
    snr_grid_db
        .iter()
        .map(|&snr| {
            let jitter: f64 = rng.sample(StandardNormal);
            let v = 1.0 - slope * snr_amplitude(snr) + noise_sd * jitter;
            (condition_id(snr), v.clamp(0.0, 1.0))
        })
        .collect()
}

/// Writes `manifest.json`, one tensor per (sample, layer) under
/// `<sample_id>/layer_<l>.see`, the planted bases under `truth/`,
/// `conditions.csv`, a demo `outcomes.csv` and the generating `synth.json`.
pub fn write_dataset(dataset: &SynthDataset, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let io = |p: &Path, e| Error::io(p, e);
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;

    let entries = dataset
        .samples
        .par_iter()
        .map(|s| {
            let sub = dir.join(&s.sample.id);
            fs::create_dir_all(&sub).map_err(|e| io(&sub, e))?;
            let mut files = BTreeMap::new();
            for (&layer, seq) in &s.sample.layers {
                let rel = format!("{}/layer_{layer}.see", s.sample.id);
                write_activation(seq, dir.join(&rel))?;
                files.insert(layer, rel);
            }
            Ok(ManifestSample {
                id: s.sample.id.clone(),
                kind: s.sample.kind,
                files,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        layer_ids: dataset.spec.layer_ids(),
        samples: entries,
    };
    write_manifest(&manifest, dir.join("manifest.json"))?;

    let truth_dir = dir.join("truth");
    fs::create_dir_all(&truth_dir).map_err(|e| io(&truth_dir, e))?;
    write_tensor(&dataset.truth.semantic_basis, truth_dir.join("semantic_basis.see"))?;
    write_tensor(&dataset.truth.noise_basis, truth_dir.join("noise_basis.see"))?;

    let mut conditions = String::from("sample_id,condition_id,snr_db,amplitude\n");
    for s in dataset.tests() {
        let snr = s.snr_db.expect("test samples carry an SNR");
        conditions.push_str(&format!(
            "{},{},{},{}\n",
            s.sample.id,
            s.condition.as_deref().unwrap_or_default(),
            snr,
            crate::see::format_float(snr_amplitude(snr))
        ));
    }
    let path = dir.join("conditions.csv");
    fs::write(&path, conditions).map_err(|e| io(&path, e))?;

    let mut outcomes = String::from("condition_id,outcome\n");
    for (c, v) in synthetic_outcomes(&dataset.spec.snr_grid_db, 0.25, 0.01, dataset.spec.seed) {
        outcomes.push_str(&format!("{c},{}\n", crate::see::format_float(v)));
    }
    let path = dir.join("outcomes.csv");
    fs::write(&path, outcomes).map_err(|e| io(&path, e))?;

    let path = dir.join("synth.json");
    let mut text = serde_json::to_string_pretty(&dataset.spec).expect("spec serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(manifest)
}
