use std::fs;
use std::path::{Component, Path, PathBuf};

use seekit_core::calibrate::{CalibConfig, LayerDiagnostics, SvMode};
use seekit_core::see::{score_samples, write_scores_csv, SeeScore};
use seekit_core::seen::{neutralize_samples, NeutralizeConfig};
use seekit_core::stats::{correlation_report, read_outcomes_csv};
use seekit_core::synth::{generate_dataset, write_dataset, SynthSpec};
use seekit_core::tensor_io::{
    load_bundle, load_dataset, load_manifest, save_bundle, write_activation, write_manifest, ActivationDataset,
    DatasetManifest, ManifestSample, Sample,
};
use seekit_core::Error;

use crate::{CalibrateArgs, Failure, KindArg, NeutralizeArgs, ReportArgs, ScoreArgs, SynthArgs};

fn ensure_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

fn select(dataset: &ActivationDataset, kind: KindArg) -> Result<Vec<&Sample>, Error> {
    let picked: Vec<&Sample> = dataset
        .samples()
        .iter()
        .filter(|s| kind.filter().is_none_or(|k| s.kind == k))
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptySet {
            kind: format!("{kind:?}").to_lowercase(),
        });
    }
    Ok(picked)
}

fn print_diagnostics(diags: &[LayerDiagnostics], mean_m: f64, mean_d: f64, ranks: &dyn Fn(u32) -> Option<usize>) {
    println!("{:>6}  {:>14}  {:>10}  {:>8}  {:>4}", "layer", "M", "D", "selected", "rank");
    for d in diags {
        let (sel, rank) = match ranks(d.layer_id) {
            Some(r) => ("*", r.to_string()),
            None => ("", "-".to_string()),
        };
        println!(
            "{:>6}  {:>14.6e}  {:>10.6}  {:>8}  {:>4}",
            d.layer_id, d.magnitude, d.direction, sel, rank
        );
    }
    println!("{:>6}  {:>14.6e}  {:>10.6}", "mean", mean_m, mean_d);
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let config = CalibConfig {
        delta: args.delta,
        sv_mode: match args.alpha {
            Some(alpha) => SvMode::Absolute(alpha),
            None => SvMode::EnergyRatio(args.energy_ratio),
        },
        epsilon: args.epsilon,
        fallback_argmax: args.fallback_argmax,
    };
    config.validate()?;
    let dataset = load_dataset(&args.manifest)?;
    let cal = match seekit_core::calibrate(&dataset, &config) {
        Ok(cal) => cal,
        Err(e) => {
            if let Error::Localization {
                diagnostics,
                mean_magnitude,
                mean_direction,
            } = &e
            {
                print_diagnostics(diagnostics, *mean_magnitude, *mean_direction, &|_| None);
                println!("selected layers: none");
            }
            return Err(e.into());
        }
    };
    save_bundle(&cal.bundle, &args.out)?;

    let bundle = &cal.bundle;
    print_diagnostics(
        &cal.diagnostics,
        cal.localization.mean_magnitude,
        cal.localization.mean_direction,
        &|l| bundle.basis(l).map(|q| q.ncols()),
    );
    println!(
        "selected layers: {}{}",
        join_ids(bundle.selected_layers()),
        if cal.localization.used_fallback { " (argmax fallback)" } else { "" }
    );
    println!("bundle: {}", args.out.display());
    Ok(())
}

fn print_scores(scores: &[SeeScore]) {
    println!("{:<24}  {:>14}", "sample_id", "see");
    for s in scores {
        println!("{:<24}  {:>14.6e}", s.sample_id, s.scaled_aggregate());
    }
    let mean = scores.iter().map(SeeScore::scaled_aggregate).sum::<f64>() / scores.len() as f64;
    println!("{:<24}  {:>14.6e}", "mean", mean);
}

pub(crate) fn score(args: ScoreArgs) -> Result<(), Failure> {
    if !(args.scale.is_finite() && args.scale > 0.0) {
        return Err(Failure::Usage(format!("--scale must be positive, got {}", args.scale)));
    }
    let bundle = load_bundle(&args.bundle)?;
    let dataset = load_dataset(&args.manifest)?;
    let samples = select(&dataset, args.kind)?;
    let mut scores = score_samples(samples, &bundle)?;
    for s in &mut scores {
        s.scale = args.scale;
    }
    ensure_parent(&args.out)?;
    write_scores_csv(&scores, &args.out)?;
    print_scores(&scores);
    Ok(())
}

/// Output path (relative to `--out`) for one neutralized tensor: the input's
/// relative path with `_seen` before the extension, or a generated location
/// when the input path is absolute or escapes its directory.
fn seen_path(original: &str, index: usize, layer: u32) -> String {
    let p = Path::new(original);
    let mirrored = p.components().all(|c| matches!(c, Component::Normal(_)));
    match (mirrored, p.file_stem().and_then(|s| s.to_str())) {
        (true, Some(stem)) => {
            let name = match p.extension().and_then(|e| e.to_str()) {
                Some(ext) => format!("{stem}_seen.{ext}"),
                None => format!("{stem}_seen"),
            };
            let out = p.with_file_name(name);
            out.to_str().expect("built from UTF-8 parts").replace('\\', "/")
        }
        _ => format!("sample_{index:05}/layer_{layer}_seen.see"),
    }
}

pub(crate) fn neutralize(args: NeutralizeArgs) -> Result<(), Failure> {
    let config = NeutralizeConfig::new(args.lambda)?;
    let bundle = load_bundle(&args.bundle)?;
    let source = load_manifest(&args.manifest)?;
    let dataset = load_dataset(&args.manifest)?;
    let samples = select(&dataset, args.kind)?;
    let before = score_samples(samples.iter().copied(), &bundle)?;
    let cleaned = neutralize_samples(samples.iter().copied(), &bundle, &config)?;

    let mut entries = Vec::with_capacity(cleaned.len());
    for (i, s) in cleaned.iter().enumerate() {
        let original = &source
            .samples
            .iter()
            .find(|m| m.id == s.id)
            .expect("dataset samples come from the manifest")
            .files;
        let mut files = std::collections::BTreeMap::new();
        for (&layer, seq) in &s.layers {
            let rel = seen_path(&original[&layer], i, layer);
            let path: PathBuf = args.out.join(&rel);
            ensure_parent(&path)?;
            write_activation(seq, &path)?;
            files.insert(layer, rel);
        }
        entries.push(ManifestSample {
            id: s.id.clone(),
            kind: s.kind,
            files,
        });
    }
    let manifest = DatasetManifest {
        layer_ids: dataset.layer_ids().to_vec(),
        samples: entries,
    };
    write_manifest(&manifest, args.out.join("manifest.json"))?;

    let after = score_samples(&cleaned, &bundle)?;
    println!("{:<24}  {:>14}  {:>14}", "sample_id", "see_before", "see_after");
    for (b, a) in before.iter().zip(&after) {
        println!("{:<24}  {:>14.6e}  {:>14.6e}", b.sample_id, b.aggregate, a.aggregate);
    }
    let mean = |v: &[SeeScore]| v.iter().map(|s| s.aggregate).sum::<f64>() / v.len() as f64;
    println!("{:<24}  {:>14.6e}  {:>14.6e}", "mean", mean(&before), mean(&after));
    println!("lambda: {}  output: {}", config.lambda, args.out.display());
    Ok(())
}

pub(crate) fn synth(args: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        dims: args.dims,
        num_layers: args.layers,
        semantic_rank: args.semantic_rank,
        noise_rank: args.noise_rank,
        noise_onset_layer: args.noise_onset,
        samples_per_kind: args.samples,
        frames: args.frames,
        snr_grid_db: args.snr,
        tests_per_level: args.tests_per_level,
        environment_snr_db: args.environment_snr,
        overlap_angle: args.overlap_angle,
        jitter: args.jitter,
        seed: args.seed,
    };
    let dataset = generate_dataset(&spec)?;
    let manifest = write_dataset(&dataset, &args.out)?;
    println!(
        "{} samples ({} calibration pairs, {} test) over {} layers, d={}",
        manifest.samples.len(),
        spec.samples_per_kind,
        spec.snr_grid_db.len() * spec.tests_per_level,
        spec.num_layers,
        spec.dims
    );
    println!("noise planted at layers {}..={}", spec.noise_onset_layer, spec.num_layers);
    println!("manifest: {}", args.out.join("manifest.json").display());
    Ok(())
}

pub(crate) fn report(args: ReportArgs) -> Result<(), Failure> {
    let scores = seekit_core::see::read_scores_csv(&args.scores)?;
    let outcomes = read_outcomes_csv(&args.outcomes)?;
    let report = correlation_report(&scores, &outcomes, args.iterations, args.seed)?;
    ensure_parent(&args.out)?;
    report.write_csv(&args.out)?;
    if let Some(svg) = &args.svg {
        ensure_parent(svg)?;
        report.write_svg(svg)?;
    }
    println!("{:<16}  {:>14}  {:>10}  {:>6}", "condition_id", "see_mean", "outcome", "n");
    for r in &report.rows {
        println!(
            "{:<16}  {:>14.6e}  {:>10.4}  {:>6}",
            r.condition_id, r.see_mean, r.outcome, r.samples
        );
    }
    println!("r = {:.6}  p = {:.6} ({} permutations)", report.r, report.p, report.iterations);
    Ok(())
}
