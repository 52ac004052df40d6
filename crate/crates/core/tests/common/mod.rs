#![allow(dead_code)]

use std::path::Path;

use voxharm::nifti;
use voxharm::pipeline::{generate_phantoms, PhantomSpec};
use voxharm::transforms::IntensityMap;
use voxharm::Volume;

/// Writes `source/` and `target/` phantom datasets under `base`.
pub fn phantom_datasets(base: &Path, count: usize, dims: [usize; 3]) {
    generate_phantoms(&PhantomSpec::source_preset_sized(count, dims), base.join("source")).unwrap();
    generate_phantoms(&PhantomSpec::target_preset_sized(count, dims), base.join("target")).unwrap();
}

pub fn read_dir_volumes(dir: &Path) -> Vec<(String, Volume)> {
    let mut paths: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| (voxharm::pipeline::case_id(&p), nifti::read_volume(&p).unwrap()))
        .collect()
}

pub fn load_map(path: &Path) -> IntensityMap {
    IntensityMap::load(path).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
