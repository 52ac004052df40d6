mod common;

use std::fs;

use common::{load_map, phantom_datasets, read_dir_volumes, rel_close};
use voxharm::histogram::dataset_distance;
use voxharm::nifti;
use voxharm::pipeline::{run_pipeline, Manifest, PipelineConfig, Stage};
use voxharm::resample::ResampleSpec;
use voxharm::stats::compute_stats;
use voxharm::transforms::{apply_map, Harmonization};
use voxharm::Vocabulary;

const SMALL: [usize; 3] = [20, 20, 16];

fn without_resample(mut c: PipelineConfig) -> PipelineConfig {
    c.resample = None;
    c
}

#[test]
fn all_identity_pipeline_reproduces_inputs() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 2, SMALL);
    let text = r#"
        [target]
        dir = "target"
        labels = "labels/*.nii.gz"
        [clip]
        lo_pct = 0.0
        hi_pct = 100.0
        [output]
        dir = "out"
    "#;
    let path = dir.path().join("identity.toml");
    fs::write(&path, text).unwrap();
    let mut config = PipelineConfig::load(&path).unwrap();
    let native = nifti::read_volume(dir.path().join("target/volumes/target_000.nii.gz")).unwrap();
    config.resample = Some(ResampleSpec {
        target_spacing: native.spacing(),
        ..ResampleSpec::default()
    });
    assert_eq!(config.effective_stages(), vec![Stage::Clip, Stage::Resample]);
    run_pipeline(&config, None).unwrap();

    let inputs = read_dir_volumes(&dir.path().join("target/volumes"));
    let outputs = read_dir_volumes(&dir.path().join("out/volumes"));
    assert_eq!(inputs.len(), outputs.len());
    for ((ia, a), (ib, b)) in inputs.iter().zip(&outputs) {
        assert_eq!(ia, ib);
        assert_eq!(a.geometry(), b.geometry());
        assert_eq!(a.data(), b.data(), "{ia}");
    }
    let la = nifti::read_labels(
        dir.path().join("target/labels/target_001.nii.gz"),
        &Vocabulary::kits(),
        true,
    )
    .unwrap();
    let lb = nifti::read_labels(
        dir.path().join("out/labels/target_001.nii.gz"),
        &Vocabulary::kits(),
        true,
    )
    .unwrap();
    assert_eq!(la, lb);
}

#[test]
fn dataset1_preset_matches_target_moments() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 3, SMALL);
    let config = PipelineConfig::dataset1(dir.path()).unwrap();
    let manifest = run_pipeline(&config, None).unwrap();

    let target = manifest.stat("target_input").unwrap();
    let shifted = manifest.stat("source_harmonized").unwrap();
    assert!(
        rel_close(shifted.mean, target.mean, 1e-6),
        "{} vs {}",
        shifted.mean,
        target.mean
    );
    assert!(rel_close(shifted.std, target.std, 1e-6));

    // Recompute independently: apply the persisted map to the raw inputs.
    let h = manifest.harmonization.as_ref().unwrap();
    let map = load_map(&dir.path().join("dataset1").join(&h.maps["source_000"]));
    let sources: Vec<_> = read_dir_volumes(&dir.path().join("source/volumes"))
        .into_iter()
        .map(|(_, v)| apply_map(&v, &map).unwrap())
        .collect();
    let targets: Vec<_> = read_dir_volumes(&dir.path().join("target/volumes"))
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let (s, t) = (
        compute_stats(&sources, None, &[]).unwrap(),
        compute_stats(&targets, None, &[]).unwrap(),
    );
    assert!(rel_close(s.mean, t.mean, 1e-6) && rel_close(s.std, t.std, 1e-6));

    // Output layout.
    let out = dir.path().join("dataset1");
    assert_eq!(fs::read_dir(out.join("volumes")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(out.join("labels")).unwrap().count(), 6);
    assert!(out.join("maps/moment_shift.json").exists());
    assert_eq!(Manifest::load(&out).unwrap(), manifest);
    let o = manifest.outputs.iter().find(|o| o.id == "source_000").unwrap();
    assert_eq!(o.spacing, [0.7636; 3]);
    let labels = nifti::read_labels(out.join(o.labels.as_ref().unwrap()), &Vocabulary::kits(), true).unwrap();
    assert!(
        labels.present_labels().iter().all(|&l| l <= 2),
        "artery and vein removed"
    );
}

#[test]
fn dataset2_preset_matches_target_distribution() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 3, SMALL);
    let config = without_resample(PipelineConfig::dataset2(dir.path()).unwrap());
    let manifest = run_pipeline(&config, None).unwrap();
    let h = manifest.harmonization.as_ref().unwrap();
    assert_eq!(h.method, "histogram_match");
    assert!(h.distance_after.ks < 0.02, "{:?}", h.distance_after);
    assert!(h.distance_before.ks > 0.9);

    // Recompute the distance from the persisted per-volume maps.
    let out = dir.path().join("dataset2");
    let sources: Vec<_> = read_dir_volumes(&dir.path().join("source/volumes"))
        .into_iter()
        .map(|(id, v)| apply_map(&v, &load_map(&out.join(&h.maps[&id]))).unwrap())
        .collect();
    let targets: Vec<_> = read_dir_volumes(&dir.path().join("target/volumes"))
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let d = dataset_distance(&sources, &targets, 4096).unwrap();
    assert!((d.ks - h.distance_after.ks).abs() < 1e-12);
}

#[test]
fn histogram_matching_beats_moment_shift() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 2, SMALL);
    let d1 = run_pipeline(&without_resample(PipelineConfig::dataset1(dir.path()).unwrap()), None).unwrap();
    let d2 = run_pipeline(&without_resample(PipelineConfig::dataset2(dir.path()).unwrap()), None).unwrap();
    let (h1, h2) = (d1.harmonization.unwrap(), d2.harmonization.unwrap());
    assert_eq!(h1.distance_before, h2.distance_before);
    assert!(h2.distance_after.ks < h1.distance_after.ks, "{h1:?} {h2:?}");
    assert!(h1.distance_after.ks < h1.distance_before.ks);
}

#[test]
fn normalized_output_has_unit_moments() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 2, SMALL);
    let config = without_resample(PipelineConfig::dataset2(dir.path()).unwrap());
    let manifest = run_pipeline(&config, None).unwrap();
    let s = manifest.stat("combined_normalized").unwrap();
    assert!(s.mean.abs() < 1e-6 && (s.std - 1.0).abs() < 1e-6, "{s:?}");
    let written: Vec<_> = read_dir_volumes(&dir.path().join("dataset2/volumes"))
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let w = compute_stats(&written, None, &[]).unwrap();
    assert!(w.mean.abs() < 1e-6 && (w.std - 1.0).abs() < 1e-6, "{w:?}");
}

#[test]
fn reruns_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 3, SMALL);
    let mut config = PipelineConfig::dataset2(dir.path()).unwrap();
    let one = run_pipeline(&config, Some(1)).unwrap();
    let first_bytes = fs::read(dir.path().join("dataset2/manifest.json")).unwrap();
    let four = run_pipeline(&config, Some(4)).unwrap();
    assert_eq!(one, four);
    assert_eq!(
        first_bytes,
        fs::read(dir.path().join("dataset2/manifest.json")).unwrap()
    );

    config.output.dir = dir.path().join("elsewhere");
    let other = run_pipeline(&config, Some(3)).unwrap();
    assert_eq!(other.digest, one.digest);
    assert_eq!(other.outputs, one.outputs);

    // Recorded digests describe the written data arrays.
    for o in &one.outputs {
        let raw = nifti::read_volume(dir.path().join("dataset2").join(&o.volume)).unwrap();
        let bytes = nifti::encode_volume(&raw, &nifti::WriteOptions::new(nifti::DataType::Float32)).unwrap();
        assert_eq!(
            voxharm::pipeline::sha256_hex(&bytes[nifti::DATA_OFFSET..]),
            o.volume_sha256
        );
    }
}

#[test]
fn stage_errors_name_stage_and_case() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 2, SMALL);
    fs::write(dir.path().join("source/volumes/source_001.nii.gz"), b"not a nifti file").unwrap();
    let config = PipelineConfig::dataset1(dir.path()).unwrap();
    let err = run_pipeline(&config, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("`load`") && msg.contains("source_001"), "{msg}");
    assert!(!dir.path().join("dataset1").exists());
    assert!(!dir.path().join(".dataset1.staging").exists());
}

#[test]
fn existing_foreign_output_is_not_replaced() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 1, SMALL);
    fs::create_dir_all(dir.path().join("dataset1")).unwrap();
    fs::write(dir.path().join("dataset1/notes.txt"), "keep").unwrap();
    let err = run_pipeline(&PipelineConfig::dataset1(dir.path()).unwrap(), None).unwrap_err();
    assert!(err.to_string().contains("refusing"), "{err}");
    assert_eq!(
        fs::read_to_string(dir.path().join("dataset1/notes.txt")).unwrap(),
        "keep"
    );
}

#[test]
fn foreground_statistics_mask() {
    let dir = tempfile::tempdir().unwrap();
    phantom_datasets(dir.path(), 2, SMALL);
    let mut config = without_resample(PipelineConfig::dataset1(dir.path()).unwrap());
    config.statistics_mask = voxharm::pipeline::StatisticsMask::Foreground;
    config.harmonization = Harmonization::None;
    config.stages = Some(vec![Stage::Remap, Stage::Clip, Stage::Normalize]);
    config.validate().unwrap();
    let m = run_pipeline(&config, None).unwrap();
    let n = m.normalization.unwrap();
    // Foreground stats ignore the air mode, so the mean is far above it.
    assert!(n.mean > 0.0, "{n:?}");
}
