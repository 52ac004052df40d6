use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use voxharm::pipeline::{generate_phantoms, PhantomSpec, DATASET1_PRESET, DATASET2_PRESET};

const DIMS: [usize; 3] = [18, 18, 14];

fn voxharm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxharm"))
        .current_dir(dir)
        .env_remove("VOXHARM_THREADS")
        .args(args)
        .output()
        .expect("spawn voxharm")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Failure output is exactly one JSON line on stderr.
fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    serde_json::from_str(lines[0]).expect("stderr is JSON")
}

fn phantoms(base: &Path, count: usize) {
    generate_phantoms(&PhantomSpec::source_preset_sized(count, DIMS), base.join("source")).unwrap();
    generate_phantoms(&PhantomSpec::target_preset_sized(count, DIMS), base.join("target")).unwrap();
}

#[test]
fn run_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 3);
    fs::write(dir.path().join("dataset2.toml"), DATASET2_PRESET).unwrap();
    let one = ok_json(&voxharm(
        dir.path(),
        &["run", "--config", "dataset2.toml", "--threads", "1"],
    ));
    let manifest_one = fs::read(dir.path().join("dataset2/manifest.json")).unwrap();
    let four = Command::new(env!("CARGO_BIN_EXE_voxharm"))
        .current_dir(dir.path())
        .env("VOXHARM_THREADS", "4")
        .args(["run", "--config", "dataset2.toml"])
        .output()
        .unwrap();
    let four = ok_json(&four);
    assert_eq!(one["digest"], four["digest"]);
    assert_eq!(one["outputs"], 6);
    assert!(one["distance"]["after"]["ks"].as_f64().unwrap() < 0.02);
    assert_eq!(
        manifest_one,
        fs::read(dir.path().join("dataset2/manifest.json")).unwrap()
    );
    assert_eq!(fs::read_dir(dir.path().join("dataset2/maps")).unwrap().count(), 3);
}

#[test]
fn preprocess_skips_remap_and_harmonization() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 1);
    fs::write(dir.path().join("d1.toml"), DATASET1_PRESET).unwrap();
    let out = ok_json(&voxharm(dir.path(), &["preprocess", "--config", "d1.toml"]));
    assert_eq!(out["stages"], serde_json::json!(["clip", "normalize", "resample"]));
    assert!(out["distance"].is_null());
}

#[test]
fn harmonize_histogram_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 2);
    let h = ok_json(&voxharm(
        dir.path(),
        &[
            "harmonize",
            "--method",
            "shift",
            "--source",
            "source/volumes",
            "--reference",
            "target/volumes",
            "--out",
            "shifted",
        ],
    ));
    assert_eq!(h["method"], "moment_shift");
    assert!(dir.path().join("shifted/maps/moment_shift.json").exists());

    let s = ok_json(&voxharm(dir.path(), &["stats", "shifted/volumes/*.nii.gz"]));
    let t = ok_json(&voxharm(dir.path(), &["stats", "target/volumes/*.nii.gz"]));
    let (sm, tm) = (
        s["stats"]["mean"].as_f64().unwrap(),
        t["stats"]["mean"].as_f64().unwrap(),
    );
    // Output is stored as float32, so agreement is to single precision.
    assert!((sm - tm).abs() < 1e-3 * tm.abs(), "{sm} vs {tm}");

    ok_json(&voxharm(
        dir.path(),
        &[
            "histogram",
            "target=target/volumes/*",
            "source=source/volumes/*",
            "shifted=shifted/volumes/*",
            "--bins",
            "32",
            "--out",
            "plot.csv",
        ],
    ));
    let csv = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 32);
    assert!(csv.starts_with("series,bin_left,bin_right,count,density\nshifted,"));

    let bad = error_json(&voxharm(
        dir.path(),
        &["histogram", "target/volumes/*", "--range=5,1", "--out", "p.csv"],
    ));
    assert_eq!(bad["error"], "invalid_argument");
}

#[test]
fn evaluate_prints_percent_scores() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 2);
    let out = voxharm(
        dir.path(),
        &[
            "evaluate",
            "--pred",
            "target/labels",
            "--gt",
            "target/labels",
            "--out",
            "report.json",
            "--csv",
            "report.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(
        table.contains("kidney_and_masses") && table.contains("100.000000"),
        "{table}"
    );
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["kidney"], 1.0);
    assert_eq!(
        fs::read_to_string(dir.path().join("report.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 2 * 5
    );

    fs::write(
        dir.path().join("regions.toml"),
        "[[regions]]\nname = \"fg\"\nlabels = [1, 2]\n",
    )
    .unwrap();
    let out = voxharm(
        dir.path(),
        &[
            "evaluate",
            "--pred",
            "target/labels",
            "--gt",
            "target/labels",
            "--regions",
            "regions.toml",
            "--out",
            "r.json",
        ],
    );
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("fg"));
}

#[test]
fn remap_and_resample_labels() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 1);
    let map = "description = \"drop vessels\"\nmapping = { 3 = 0, 4 = 0 }\n\n[target_vocabulary]\n1 = \"kidney\"\n2 = \"tumor\"\n3 = \"cyst\"\n";
    fs::write(dir.path().join("map.toml"), map).unwrap();
    ok_json(&voxharm(
        dir.path(),
        &[
            "remap",
            "--map",
            "map.toml",
            "source/labels/*.nii.gz",
            "--out",
            "remapped",
        ],
    ));
    let labels = voxharm::nifti::read_labels(
        dir.path().join("remapped/source_000.nii.gz"),
        &voxharm::Vocabulary::kits(),
        true,
    )
    .unwrap();
    assert!(labels.present_labels().iter().all(|&l| l <= 2));

    let r = ok_json(&voxharm(
        dir.path(),
        &[
            "resample",
            "--spacing",
            "1.4",
            "--labels",
            "remapped/*.nii.gz",
            "--out",
            "coarse",
        ],
    ));
    assert_eq!(r["spacing"], serde_json::json!([1.4, 1.4, 1.4]));
    let coarse = voxharm::nifti::read_labels(
        dir.path().join("coarse/source_000.nii.gz"),
        &voxharm::Vocabulary::kits(),
        true,
    )
    .unwrap();
    assert!(coarse.present_labels().is_subset(&labels.present_labels()));
}

#[test]
fn phantom_seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::target_preset_sized(1, [12, 12, 10]);
    fs::write(dir.path().join("spec.toml"), toml::to_string(&spec).unwrap()).unwrap();
    for out in ["a", "b"] {
        let j = ok_json(&voxharm(
            dir.path(),
            &["phantom", "--spec", "spec.toml", "--seed", "77", "--out", out],
        ));
        assert_eq!(j["seed"], 77);
    }
    let read = |d: &str| fs::read(dir.path().join(d).join("volumes/target_000.nii.gz")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn failures_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_json(&voxharm(dir.path(), &["run", "--config", "missing.toml"]));
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("missing.toml"));

    let e = error_json(&voxharm(dir.path(), &["stats"]));
    assert_eq!(e["error"], "usage");
    let e = error_json(&voxharm(dir.path(), &["stats", "nothing/*.nii"]));
    assert_eq!(e["error"], "empty");
    let e = error_json(&voxharm(dir.path(), &["--threads", "0", "stats", "x"]));
    assert_eq!(e["error"], "invalid_argument");

    fs::write(
        dir.path().join("bad.toml"),
        "normalize = \"yes\"\n[target]\ndir = \"t\"\n[output]\ndir = \"o\"\n",
    )
    .unwrap();
    let e = error_json(&voxharm(dir.path(), &["run", "--config", "bad.toml"]));
    assert_eq!(e["error"], "config");
}

#[test]
fn stage_failure_names_stage_and_case() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 2);
    fs::write(dir.path().join("target/volumes/target_001.nii.gz"), b"garbage").unwrap();
    fs::write(dir.path().join("d1.toml"), DATASET1_PRESET).unwrap();
    let e = error_json(&voxharm(dir.path(), &["run", "--config", "d1.toml"]));
    assert_eq!(e["error"], "stage");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("load") && msg.contains("target_001"), "{msg}");
}
