//! The on-disk contract used by external producers (e.g. an activation
//! exporter attached to a live model): tensors and manifest fragments are
//! produced here without the crate's writers, then consumed by the pipeline.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seekit_core::calibrate::{calibrate, CalibConfig};
use seekit_core::see::score_samples;
use seekit_core::tensor_io::{encode_tensor, load_dataset, load_manifest, read_activation};
use seekit_core::{Error, SampleKind};

/// Independent encoder following the documented byte layout.
fn hand_encode(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"SEE1");
    out.push(0);
    out.push(2);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[test]
fn hand_encoded_files_match_the_crate_encoder() {
    let values = [1.5f32, -2.0, 0.25, 3.0e-8, 7.0, -0.0];
    let bytes = hand_encode(2, 3, &values);
    let m = DMatrix::from_row_iterator(2, 3, values.iter().map(|&v| f64::from(v)));
    assert_eq!(encode_tensor(&m).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.see");
    fs::write(&path, &bytes).unwrap();
    let seq = read_activation(&path).unwrap();
    assert_eq!((seq.frames(), seq.dims()), (2, 3));
    assert_eq!(seq.data()[(0, 1)], -2.0);
    assert_eq!(seq.data()[(1, 0)], 3.0e-8f32 as f64);
}

/// Writes `count` samples of one kind as an external tool would: one file
/// per (sample, layer) and a manifest fragment listing them.
fn write_fragment(
    root: &Path,
    kind: &str,
    count: usize,
    layers: &[u32],
    make: &mut dyn FnMut(usize, u32) -> (usize, Vec<f32>),
) -> String {
    let d = 6;
    let mut entries = Vec::new();
    for i in 0..count {
        let id = format!("{kind}-{i}");
        let mut files = Vec::new();
        for &layer in layers {
            let (frames, values) = make(i, layer);
            let rel = format!("dump/{id}.L{layer}.see");
            fs::create_dir_all(root.join("dump")).unwrap();
            fs::write(root.join(&rel), hand_encode(frames, d, &values)).unwrap();
            files.push(format!("\"{layer}\": \"{rel}\""));
        }
        entries.push(format!(
            "{{\"id\": \"{id}\", \"kind\": \"{kind}\", \"files\": {{{}}}}}",
            files.join(", ")
        ));
    }
    entries.join(", ")
}

#[test]
fn concatenated_fragments_load_calibrate_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let layers = [10u32, 11, 12];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise_axis = 4usize;

    // Clean captures live in the first three axes; noise captures put most of
    // their energy on axis 4 at layer 12 only, with a faint shared trace in
    // the clean captures there.
    let frag = |kind: &'static str| {
        let mut rng = ChaCha8Rng::seed_from_u64(if kind == "semantic" { 1 } else { 2 });
        move |i: usize, layer: u32| {
            let frames = 3 + i % 4;
            let mut values = vec![0f32; frames * 6];
            let mut pair = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let noise_level: f32 = pair.random_range(0.5..1.5);
            for t in 0..frames {
                for c in 0..6 {
                    let jitter: f32 = rng.random_range(-1e-3..1e-3);
                    values[t * 6 + c] = jitter;
                }
                if kind == "semantic" {
                    for c in 0..3 {
                        values[t * 6 + c] += rng.random_range(0.5..1.5);
                    }
                    if layer == 12 {
                        values[t * 6 + noise_axis] += 0.05 * noise_level;
                    }
                } else if layer == 12 {
                    values[t * 6 + noise_axis] += noise_level;
                }
            }
            (frames, values)
        }
    };
    let semantic = write_fragment(root, "semantic", 8, &layers, &mut frag("semantic"));
    let noise = write_fragment(root, "noise", 8, &layers, &mut frag("noise"));
    let test = write_fragment(root, "test", 2, &layers, &mut |_, _| {
        (2, (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    });
    let manifest = format!(
        "{{\"layer_ids\": [10, 11, 12], \"samples\": [{semantic}, {noise}, {test}]}}"
    );
    let path = root.join("manifest.json");
    fs::write(&path, manifest).unwrap();

    let parsed = load_manifest(&path).unwrap();
    assert_eq!(parsed.samples.len(), 18);
    let dataset = load_dataset(&path).unwrap();
    assert_eq!(dataset.count(SampleKind::Noise), 8);

    // Too few layers for the means test to be meaningful; this checks the
    // file contract, so take the largest-discrepancy layer.
    let config = CalibConfig {
        fallback_argmax: true,
        ..CalibConfig::default()
    };
    let cal = calibrate(&dataset, &config).unwrap();
    assert_eq!(cal.bundle.selected_layers(), &[12]);
    let q = cal.bundle.basis(12).unwrap();
    assert_eq!(q.ncols(), 1);
    assert!(q[(noise_axis, 0)].abs() > 0.999);

    let scores = score_samples(dataset.samples_of(SampleKind::Test), &cal.bundle).unwrap();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|s| (0.0..1.0).contains(&s.aggregate)));
}

#[test]
fn producer_mistakes_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("a.see"), hand_encode(1, 2, &[1.0, 2.0])).unwrap();

    let cases = [
        (r#"{"layer_ids": [1], "samples": [{"id": "a", "kind": "noise", "files": {"1": "a.see"}, "extra": 1}]}"#, "unknown field"),
        (r#"{"layer_ids": [1, 2], "samples": [{"id": "a", "kind": "noise", "files": {"1": "a.see"}}]}"#, "layer 2"),
        (r#"{"layer_ids": [1], "samples": [{"id": "a", "kind": "clean", "files": {"1": "a.see"}}]}"#, "clean"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let path = root.join(format!("m{i}.json"));
        fs::write(&path, text).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Manifest { .. }), "{err}");
        assert!(err.to_string().contains(needle), "{err}");
    }

    let path = root.join("missing.json");
    fs::write(
        &path,
        r#"{"layer_ids": [1], "samples": [{"id": "b", "kind": "test", "files": {"1": "nope.see"}}]}"#,
    )
    .unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(matches!(&err, Error::Load { sample_id, layer: 1, .. } if sample_id == "b"), "{err}");
}
