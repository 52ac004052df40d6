use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use super::config::{DatasetConfig, PipelineConfig, Stage, StatisticsMask};
use super::manifest::{
    combined_digest, sha256_hex, ClipRecord, HarmonizationRecord, InputRecord, Manifest, NormalizationRecord,
    OutputRecord, Role, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::histogram::dataset_distance;
use crate::nifti::{self, DataType, NiftiHeaderView, Orientation, WriteOptions, DATA_OFFSET};
use crate::resample::{resample_labels, resample_volume};
use crate::stats::{compute_stats, DatasetStats, Foreground, Selection};
use crate::transforms::{clip_percentiles, harmonize_dataset, remap_labels, znormalize, FittedMaps};
use crate::volume::{LabelMap, Volume};

/// Bin count for the harmonization distances recorded in the manifest.
pub const DISTANCE_BINS: usize = 4096;
const REPORT_PERCENTILES: [f64; 3] = [0.5, 50.0, 99.5];

/// File name without `.nii.gz` / `.nii`.
pub fn case_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for ext in [".nii.gz", ".nii"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

/// Files matching `dir/pattern`, sorted by case ID.
pub fn discover(dir: &Path, pattern: &str) -> Result<Vec<(String, PathBuf)>> {
    let full = dir.join(pattern);
    let full = full.to_string_lossy();
    let paths = glob::glob(&full).map_err(|e| Error::Config(format!("bad glob `{full}`: {e}")))?;
    let mut found = Vec::new();
    for p in paths {
        let p = p.map_err(|e| Error::io(e.path().to_path_buf(), e.into()))?;
        if p.is_file() {
            found.push((case_id(&p), p));
        }
    }
    found.sort();
    for w in found.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Config(format!(
                "case ID `{}` matches more than one file",
                w[0].0
            )));
        }
    }
    Ok(found)
}

struct Case {
    id: String,
    role: Role,
    volume: Volume,
    orientation: Orientation,
    labels: Option<LabelMap>,
}

fn load_dataset(config: &DatasetConfig, role: Role) -> Result<(Vec<Case>, Vec<InputRecord>)> {
    let volumes = discover(&config.dir, &config.volumes)?;
    if volumes.is_empty() {
        return Err(Error::Empty(format!(
            "no volumes match {}",
            config.dir.join(&config.volumes).display()
        )));
    }
    let labels: BTreeMap<String, PathBuf> = match &config.labels {
        Some(p) => discover(&config.dir, p)?.into_iter().collect(),
        None => BTreeMap::new(),
    };
    let records: Vec<InputRecord> = volumes
        .iter()
        .map(|(id, path)| {
            let label_path = labels.get(id).cloned();
            if config.labels.is_some() && label_path.is_none() {
                return Err(Error::Config(format!("no label file for case `{id}`")));
            }
            Ok(InputRecord {
                id: id.clone(),
                role,
                volume: path.clone(),
                labels: label_path,
            })
        })
        .collect::<Result<_>>()?;
    let cases = records
        .par_iter()
        .map(|r| {
            let load = || -> Result<Case> {
                let (volume, header): (Volume, NiftiHeaderView) = nifti::read_volume_with_header(&r.volume)?;
                let labels = match &r.labels {
                    Some(p) => {
                        let l = nifti::read_labels(p, &config.vocabulary, true)?;
                        volume.geometry().ensure_same(l.geometry(), "labels")?;
                        Some(l)
                    }
                    None => None,
                };
                Ok(Case {
                    id: r.id.clone(),
                    role,
                    volume,
                    orientation: header.orientation,
                    labels,
                })
            };
            load().map_err(|e| e.in_stage("load", &r.id))
        })
        .collect::<Result<_>>()?;
    Ok((cases, records))
}

fn stats_of(volumes: &[Volume], selection: Option<&Selection<'_>>) -> Result<DatasetStats> {
    compute_stats(volumes, selection, &REPORT_PERCENTILES)
}

fn dataset_error(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| e.in_stage(stage.name(), "*")
}

/// Runs the configured pipeline and returns its manifest. Outputs are built
/// in a staging directory next to `config.output.dir` and moved into place
/// only when every stage has succeeded.
pub fn run_pipeline(config: &PipelineConfig, threads: Option<usize>) -> Result<Manifest> {
    config.validate()?;
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| run_staged(config)),
        None => run_staged(config),
    }
}

fn run_staged(config: &PipelineConfig) -> Result<Manifest> {
    let out = &config.output.dir;
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("output directory {} has no name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = out
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    if out.exists()
        && !out.join(Manifest::FILE_NAME).exists()
        && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some()
    {
        return Err(Error::Config(format!(
            "{} exists and is not a pipeline output; refusing to replace it",
            out.display()
        )));
    }
    let staging = parent.join(format!(".{name}.staging"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = execute(config, &staging).and_then(|manifest| {
        promote(&staging, out, &parent, &name)?;
        Ok(manifest)
    });
    if result.is_err() && staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn promote(staging: &Path, out: &Path, parent: &Path, name: &str) -> Result<()> {
    if out.exists() {
        let old = parent.join(format!(".{name}.previous"));
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(out, &old).map_err(|e| Error::io(out, e))?;
        fs::rename(staging, out).map_err(|e| Error::io(out, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))
    } else {
        fs::rename(staging, out).map_err(|e| Error::io(out, e))
    }
}

fn execute(config: &PipelineConfig, staging: &Path) -> Result<Manifest> {
    let stages = config.effective_stages();
    let runs = |s: Stage| stages.contains(&s);
    let mut stats = BTreeMap::new();

    let (mut target, mut inputs) = load_dataset(&config.target, Role::Target)?;
    let mut source = match &config.source {
        Some(s) => {
            let (cases, records) = load_dataset(s, Role::Source)?;
            inputs.extend(records);
            cases
        }
        None => Vec::new(),
    };
    info!("loaded {} target and {} source cases", target.len(), source.len());

    let target_volumes: Vec<Volume> = target.iter().map(|c| c.volume.clone()).collect();
    stats.insert("target_input".to_string(), stats_of(&target_volumes, None)?);
    if !source.is_empty() {
        let vols: Vec<Volume> = source.iter().map(|c| c.volume.clone()).collect();
        stats.insert("source_input".to_string(), stats_of(&vols, None)?);
    }

    if runs(Stage::Remap) {
        let remap = config.label_remap.as_ref().expect("validated");
        source.par_iter_mut().try_for_each(|c| -> Result<()> {
            if let Some(l) = &c.labels {
                c.labels = Some(remap_labels(l, remap).map_err(|e| e.in_stage("remap", &c.id))?);
            }
            Ok(())
        })?;
    }

    let maps_dir = staging.join("maps");
    let mut harmonization = None;
    if runs(Stage::Harmonize) && !source.is_empty() {
        let err = dataset_error(Stage::Harmonize);
        let raw: Vec<Volume> = source.iter().map(|c| c.volume.clone()).collect();
        let fitted = harmonize_dataset(&raw, &target_volumes, &config.harmonization, config.seed).map_err(&err)?;
        let distance_before = dataset_distance(&raw, &target_volumes, DISTANCE_BINS).map_err(&err)?;
        let distance_after = dataset_distance(&fitted.volumes, &target_volumes, DISTANCE_BINS).map_err(&err)?;
        stats.insert(
            "source_harmonized".to_string(),
            stats_of(&fitted.volumes, None).map_err(&err)?,
        );

        fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
        let method = config.harmonization.name().to_string();
        let mut maps = BTreeMap::new();
        match &fitted.maps {
            FittedMaps::None => {}
            FittedMaps::Shared(m) => {
                let rel = format!("maps/{method}.json");
                m.save(staging.join(&rel))?;
                for c in &source {
                    maps.insert(c.id.clone(), rel.clone());
                }
            }
            FittedMaps::PerVolume(ms) => {
                for (c, m) in source.iter().zip(ms) {
                    let rel = format!("maps/{}.json", c.id);
                    m.save(staging.join(&rel))?;
                    maps.insert(c.id.clone(), rel);
                }
            }
        }
        for (c, v) in source.iter_mut().zip(fitted.volumes) {
            c.volume = v;
        }
        harmonization = Some(HarmonizationRecord {
            method,
            maps,
            distance_bins: DISTANCE_BINS,
            distance_before,
            distance_after,
        });
    }

    let mut cases: Vec<Case> = target.drain(..).chain(source.drain(..)).collect();
    {
        let mut ids: Vec<&str> = cases.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("case ID `{}` appears in both datasets", w[0])));
        }
    }

    let foreground = Foreground::NonZero;
    let label_maps: Vec<LabelMap> = match config.statistics_mask {
        StatisticsMask::All => Vec::new(),
        StatisticsMask::Foreground => cases.iter().map(|c| c.labels.clone().expect("validated")).collect(),
    };
    let selection = (config.statistics_mask == StatisticsMask::Foreground).then(|| Selection {
        labels: &label_maps,
        rule: &foreground,
    });

    let mut clip = None;
    if runs(Stage::Clip) {
        let err = dataset_error(Stage::Clip);
        let c = config.clip_config();
        let vols: Vec<Volume> = cases.iter().map(|c| c.volume.clone()).collect();
        let clipped = clip_percentiles(&vols, c.lo_pct, c.hi_pct, c.scope, selection.as_ref()).map_err(&err)?;
        stats.insert(
            "combined_clipped".to_string(),
            stats_of(&clipped.volumes, None).map_err(&err)?,
        );
        clip = Some(ClipRecord {
            lo_pct: c.lo_pct,
            hi_pct: c.hi_pct,
            scope: c.scope,
            thresholds: cases.iter().map(|c| c.id.clone()).zip(clipped.thresholds).collect(),
        });
        for (case, v) in cases.iter_mut().zip(clipped.volumes) {
            case.volume = v;
        }
    }

    let mut normalization = None;
    if runs(Stage::Normalize) {
        let err = dataset_error(Stage::Normalize);
        let vols: Vec<Volume> = cases.iter().map(|c| c.volume.clone()).collect();
        let s = compute_stats(&vols, selection.as_ref(), &[]).map_err(&err)?;
        let normalized = znormalize(&vols, &s).map_err(&err)?;
        stats.insert(
            "combined_normalized".to_string(),
            stats_of(&normalized, None).map_err(&err)?,
        );
        normalization = Some(NormalizationRecord {
            mean: s.mean,
            std: s.std,
        });
        for (case, v) in cases.iter_mut().zip(normalized) {
            case.volume = v;
        }
    }

    if runs(Stage::Resample) {
        let spec = config.resample_spec();
        cases.par_iter_mut().try_for_each(|c| -> Result<()> {
            let wrap = |e: Error| e.in_stage("resample", &c.id);
            let volume = resample_volume(&c.volume, &spec).map_err(wrap)?;
            let labels = c
                .labels
                .as_ref()
                .map(|l| resample_labels(l, &spec))
                .transpose()
                .map_err(wrap)?;
            // Resampling keeps voxel (0,0,0) and the axes but not the old grid.
            c.orientation = Orientation::axis_aligned(volume.geometry());
            c.volume = volume;
            c.labels = labels;
            Ok(())
        })?;
    }

    let vols: Vec<Volume> = cases.iter().map(|c| c.volume.clone()).collect();
    stats.insert("output".to_string(), stats_of(&vols, None)?);
    drop(vols);

    let outputs = write_outputs(&cases, config.output.datatype, staging)?;
    let digest = combined_digest(&outputs);
    let resample = runs(Stage::Resample).then(|| config.resample_spec());
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        stages,
        config: config.clone(),
        inputs,
        stats,
        harmonization,
        clip,
        normalization,
        resample,
        outputs,
        digest,
    };
    manifest.write(staging)?;
    Ok(manifest)
}

fn write_outputs(cases: &[Case], datatype: DataType, staging: &Path) -> Result<Vec<OutputRecord>> {
    for sub in ["volumes", "labels"] {
        let d = staging.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    cases
        .par_iter()
        .map(|c| {
            let write = || -> Result<OutputRecord> {
                let opts = WriteOptions {
                    orientation: Some(c.orientation),
                    ..WriteOptions::new(datatype)
                };
                let rel = format!("volumes/{}.nii.gz", c.id);
                let bytes = nifti::encode_volume(&c.volume, &opts)?;
                let volume_sha256 = sha256_hex(&bytes[DATA_OFFSET..]);
                nifti::write_bytes(&staging.join(&rel), &bytes, Some(true))?;

                let (labels, labels_sha256) = match &c.labels {
                    Some(l) => {
                        let max = l.data().iter().copied().max().unwrap_or(0);
                        let dt = if max <= u8::MAX as u16 {
                            DataType::Uint8
                        } else {
                            DataType::Int16
                        };
                        let opts = WriteOptions {
                            orientation: Some(c.orientation),
                            ..WriteOptions::new(dt)
                        };
                        let rel = format!("labels/{}.nii.gz", c.id);
                        let bytes = nifti::encode_labels(l, &opts)?;
                        let digest = sha256_hex(&bytes[DATA_OFFSET..]);
                        nifti::write_bytes(&staging.join(&rel), &bytes, Some(true))?;
                        (Some(rel), Some(digest))
                    }
                    None => (None, None),
                };
                Ok(OutputRecord {
                    id: c.id.clone(),
                    role: c.role,
                    dims: c.volume.dims(),
                    spacing: c.volume.spacing(),
                    volume: rel,
                    volume_sha256,
                    labels,
                    labels_sha256,
                })
            };
            write().map_err(|e| e.in_stage("write", &c.id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_ids_strip_nifti_extensions() {
        assert_eq!(case_id(Path::new("/a/b/case_001.nii.gz")), "case_001");
        assert_eq!(case_id(Path::new("x.nii")), "x");
        assert_eq!(case_id(Path::new("x.img")), "x.img");
    }
}
