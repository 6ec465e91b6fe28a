use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn seekit(args: &[&str]) -> Output {
    seekit_env(args, &[])
}

fn seekit_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seekit"));
    cmd.args(args).env_remove("SEEKIT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset: 3 SNR levels, 3 tests each, 40 calibration pairs.
/// Localization needs m·d well above ~200; 40 × 32 keeps chance cosines small.
fn small_synth(dir: &Path, seed: &str) -> Output {
    seekit(&[
        "synth", "--out", s(dir), "--seed", seed, "--snr", "-10,0,10", "--dims", "32",
        "--samples", "40", "--frames", "8", "--tests-per-level", "3",
    ])
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn aggregates(csv: &Path) -> Vec<f64> {
    fs::read_to_string(csv)
        .unwrap()
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1] == "AGG").then(|| f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&seekit(&[])), 64);
    let out = seekit(&["calibrate", "--out", "/tmp/never"]);
    assert_eq!(code(&out), 64);
    assert!(stderr(&out).contains("--manifest"));
    assert_eq!(code(&seekit(&["score", "--bogus"])), 64);
    assert_eq!(code(&seekit(&["frobnicate"])), 64);
}

#[test]
fn help_and_version_exit_0() {
    let out = seekit(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("calibrate"));
    assert_eq!(code(&seekit(&["--version"])), 0);
    assert_eq!(code(&seekit(&["synth", "--help"])), 0);
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = seekit(&["synth", "--out", s(dir), "--snr", "-10,0,10", "--seed", "42"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("manifest.json")));
    assert!(ta.contains_key(Path::new("snr-10_0000/layer_8.see")));
    assert_eq!(ta, tb);
}

#[test]
fn full_pipeline_and_composition() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, bundle) = (tmp.path().join("data"), tmp.path().join("bundle"));
    assert_eq!(code(&small_synth(&data, "7")), 0);
    let manifest = data.join("manifest.json");

    let out = seekit(&["calibrate", "--manifest", s(&manifest), "--out", s(&bundle)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(bundle.join("bundle.json").is_file());
    let table = stdout(&out);
    assert!(table.contains("selected layers: 5,6,7,8"), "{table}");
    assert!(table.contains("mean"));

    let scores = tmp.path().join("out/scores.csv");
    let out = seekit(&[
        "score", "--manifest", s(&manifest), "--bundle", s(&bundle), "--out", s(&scores),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let before = aggregates(&scores);
    assert_eq!(before.len(), 9);
    assert!(before.iter().all(|&v| v > 1e-3));

    let seen = tmp.path().join("seen");
    let out = seekit(&[
        "neutralize", "--manifest", s(&manifest), "--bundle", s(&bundle), "--out", s(&seen),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("see_after"));

    let rescored = tmp.path().join("rescored.csv");
    let out = seekit(&[
        "score", "--manifest", s(&seen.join("manifest.json")), "--bundle", s(&bundle), "--out",
        s(&rescored),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let after = aggregates(&rescored);
    assert_eq!(after.len(), 9);
    assert!(after.iter().all(|&v| v < 1e-10), "{after:?}");

    let report = tmp.path().join("report.csv");
    let svg = tmp.path().join("report.svg");
    let out = seekit(&[
        "report", "--scores", s(&scores), "--outcomes", s(&data.join("outcomes.csv")), "--out",
        s(&report), "--svg", s(&svg), "--iterations", "2000",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("condition_id,see_mean,outcome\n"));
    assert!(text.lines().last().unwrap().starts_with("r="));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn identical_sets_fail_localization_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&small_synth(&data, "3")), 0);
    // Point every noise sample at its semantic partner's files.
    let mut m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let samples = m["samples"].as_array_mut().unwrap();
    let semantic: Vec<serde_json::Value> = samples
        .iter()
        .filter(|x| x["kind"] == "semantic")
        .map(|x| x["files"].clone())
        .collect();
    for (x, files) in samples.iter_mut().filter(|x| x["kind"] == "noise").zip(semantic) {
        x["files"] = files;
    }
    let manifest = data.join("same.json");
    fs::write(&manifest, m.to_string()).unwrap();

    let out = seekit(&["calibrate", "--manifest", s(&manifest), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stdout(&out).contains("selected layers: none"));
    assert!(stderr(&out).contains("no layer exceeds both means"));
    assert!(!tmp.path().join("b").exists());
}

#[test]
fn io_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = seekit(&["calibrate", "--manifest", s(&missing), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(code(&out), 1);

    let data = tmp.path().join("data");
    assert_eq!(code(&small_synth(&data, "5")), 0);
    let bundle = tmp.path().join("bundle");
    let manifest = data.join("manifest.json");
    assert_eq!(code(&seekit(&["calibrate", "--manifest", s(&manifest), "--out", s(&bundle)])), 0);
    // Scale one basis so it is no longer orthonormal.
    let q = bundle.join("Q_5.see");
    let mut bytes = fs::read(&q).unwrap();
    let first = f32::from_le_bytes(bytes[14..18].try_into().unwrap());
    bytes[14..18].copy_from_slice(&(first * 2.0 + 0.5).to_le_bytes());
    fs::write(&q, bytes).unwrap();
    let out = seekit(&[
        "score", "--manifest", s(&manifest), "--bundle", s(&bundle), "--out",
        s(&tmp.path().join("x.csv")),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn domain_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&small_synth(&data, "9")), 0);
    let manifest = data.join("manifest.json");
    let bundle = tmp.path().join("bundle");
    assert_eq!(code(&seekit(&["calibrate", "--manifest", s(&manifest), "--out", s(&bundle)])), 0);

    let out = seekit(&[
        "neutralize", "--manifest", s(&manifest), "--bundle", s(&bundle), "--out",
        s(&tmp.path().join("n")), "--lambda", "1.5",
    ]);
    assert_eq!(code(&out), 64);
    assert_eq!(code(&seekit(&["calibrate", "--manifest", s(&manifest), "--out", "x", "--delta", "0"])), 64);

    let scores = tmp.path().join("scores.csv");
    assert_eq!(
        code(&seekit(&["score", "--manifest", s(&manifest), "--bundle", s(&bundle), "--out", s(&scores)])),
        0
    );
    let single = tmp.path().join("one.csv");
    fs::write(&single, "condition_id,outcome\nsnr0,0.5\n").unwrap();
    let out = seekit(&[
        "report", "--scores", s(&scores), "--outcomes", s(&single), "--out",
        s(&tmp.path().join("r.csv")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("degenerate"), "{}", stderr(&out));

    let unknown = tmp.path().join("unknown.csv");
    fs::write(&unknown, "condition_id,outcome\nsnr0,0.5\nsnr10,0.9\nsnr99,0.1\n").unwrap();
    let out = seekit(&[
        "report", "--scores", s(&scores), "--outcomes", s(&unknown), "--out",
        s(&tmp.path().join("r.csv")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("snr99"));

    let out = seekit(&[
        "synth", "--out", s(&tmp.path().join("bad")), "--dims", "3", "--semantic-rank", "2",
        "--noise-rank", "2",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for threads in ["1", "4"] {
        let root = tmp.path().join(format!("t{threads}"));
        let env = [("SEEKIT_THREADS", threads)];
        let data = root.join("data");
        let run = |args: &[&str]| {
            let out = seekit_env(args, &env);
            assert_eq!(code(&out), 0, "{}", stderr(&out));
        };
        run(&["synth", "--out", s(&data), "--seed", "11", "--snr", "-5,5", "--dims", "32", "--samples", "40"]);
        run(&["calibrate", "--manifest", s(&data.join("manifest.json")), "--out", s(&root.join("bundle"))]);
        run(&[
            "score", "--manifest", s(&data.join("manifest.json")), "--bundle", s(&root.join("bundle")),
            "--out", s(&root.join("scores.csv")), "--kind", "all",
        ]);
        trees.push(tree(&root));
    }
    assert_eq!(trees[0], trees[1]);
    assert_eq!(code(&seekit_env(&["--version"], &[("SEEKIT_THREADS", "0")])), 0);
    let out = seekit_env(&["synth", "--out", s(&tmp.path().join("z"))], &[("SEEKIT_THREADS", "many")]);
    assert_eq!(code(&out), 64);
}
