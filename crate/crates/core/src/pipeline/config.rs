use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::DataType;
use crate::resample::ResampleSpec;
use crate::transforms::{ClipScope, Harmonization, LabelRemap};
use crate::volume::Vocabulary;

pub const DATASET1_PRESET: &str = include_str!("../../presets/dataset1.toml");
pub const DATASET2_PRESET: &str = include_str!("../../presets/dataset2.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Remap,
    Harmonize,
    Clip,
    Normalize,
    Resample,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [
        Stage::Remap,
        Stage::Harmonize,
        Stage::Clip,
        Stage::Normalize,
        Stage::Resample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Remap => "remap",
            Stage::Harmonize => "harmonize",
            Stage::Clip => "clip",
            Stage::Normalize => "normalize",
            Stage::Resample => "resample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    /// Glob relative to `dir`.
    #[serde(default = "default_volumes")]
    pub volumes: String,
    /// Glob relative to `dir`; files pair with volumes by case ID.
    #[serde(default)]
    pub labels: Option<String>,
    #[serde(default = "Vocabulary::kits")]
    pub vocabulary: Vocabulary,
}

fn default_volumes() -> String {
    "volumes/*.nii.gz".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub scope: ClipScope,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            lo_pct: 0.5,
            hi_pct: 99.5,
            scope: ClipScope::Pooled,
        }
    }
}

/// Voxels entering clip thresholds and normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatisticsMask {
    #[default]
    All,
    /// Non-background label voxels only; requires label maps.
    Foreground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default = "default_datatype")]
    pub datatype: DataType,
}

fn default_datatype() -> DataType {
    DataType::Float32
}

/// One pipeline run. The source dataset (optional) is harmonized onto the
/// target; both then pass through the shared clip / normalize / resample
/// chain as one combined dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub source: Option<DatasetConfig>,
    pub target: DatasetConfig,
    #[serde(default)]
    pub harmonization: Harmonization,
    #[serde(default)]
    pub clip: Option<ClipConfig>,
    #[serde(default)]
    pub statistics_mask: StatisticsMask,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub resample: Option<ResampleSpec>,
    /// Applied to source labels only.
    #[serde(default)]
    pub label_remap: Option<LabelRemap>,
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
    /// Explicit stage list; when absent, stages follow from the sections
    /// present. Must respect the fixed order.
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
}

fn lexical_normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

impl PipelineConfig {
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let config: Self = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(config)
    }

    /// Reads TOML, or JSON for a `.json` extension, resolves relative paths
    /// against the file's directory and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let mut config = Self::parse(&text, json).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    pub fn dataset1(base: &Path) -> Result<Self> {
        Self::preset(DATASET1_PRESET, base)
    }

    pub fn dataset2(base: &Path) -> Result<Self> {
        Self::preset(DATASET2_PRESET, base)
    }

    fn preset(text: &str, base: &Path) -> Result<Self> {
        let mut config = Self::parse(text, false)?;
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = lexical_normalize(&base.join(&*p));
            }
        };
        if let Some(s) = &mut self.source {
            fix(&mut s.dir);
        }
        fix(&mut self.target.dir);
        fix(&mut self.output.dir);
    }

    /// Stages that will run, in execution order.
    pub fn effective_stages(&self) -> Vec<Stage> {
        if let Some(stages) = &self.stages {
            return stages.clone();
        }
        Stage::ORDER
            .into_iter()
            .filter(|s| match s {
                Stage::Remap => self.label_remap.is_some(),
                Stage::Harmonize => self.harmonization != Harmonization::None,
                Stage::Clip => self.clip.is_some(),
                Stage::Normalize => self.normalize,
                Stage::Resample => self.resample.is_some(),
            })
            .collect()
    }

    pub fn clip_config(&self) -> ClipConfig {
        self.clip.unwrap_or_default()
    }

    pub fn resample_spec(&self) -> ResampleSpec {
        self.resample.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let stages = self.effective_stages();
        for w in stages.windows(2) {
            if w[0] >= w[1] {
                return bad(format!(
                    "stage `{}` cannot run after `{}`; order is remap, harmonize, clip, normalize, resample",
                    w[1].name(),
                    w[0].name()
                ));
            }
        }
        if self.source.is_none() {
            if stages.contains(&Stage::Harmonize) && self.harmonization != Harmonization::None {
                return bad("harmonization requires a source dataset".into());
            }
            if stages.contains(&Stage::Remap) {
                return bad("label remapping requires a source dataset".into());
            }
        }
        if stages.contains(&Stage::Remap) && self.label_remap.is_none() {
            return bad("stage `remap` listed without a label_remap section".into());
        }
        if stages.contains(&Stage::Clip) {
            let c = self.clip_config();
            if !(0.0..=100.0).contains(&c.lo_pct) || !(0.0..=100.0).contains(&c.hi_pct) || c.lo_pct >= c.hi_pct {
                return bad(format!(
                    "clip percentiles must satisfy 0 <= lo < hi <= 100, got {}, {}",
                    c.lo_pct, c.hi_pct
                ));
            }
        }
        if stages.contains(&Stage::Resample) {
            self.resample_spec()
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Harmonization::HistogramMatch(p) = &self.harmonization {
            if p.bins == 0 || p.reference_subsample == Some(0) {
                return bad("histogram matching needs positive bins and subsample size".into());
            }
        }
        if self.statistics_mask == StatisticsMask::Foreground {
            let missing = self.source.iter().chain([&self.target]).any(|d| d.labels.is_none());
            if missing {
                return bad("statistics_mask = \"foreground\" requires labels for every dataset".into());
            }
        }
        if self.output.datatype == DataType::Uint8 {
            return bad("output datatype must be int16 or float32".into());
        }
        let out = lexical_normalize(&self.output.dir);
        for input in self.source.iter().chain([&self.target]) {
            let input = lexical_normalize(&input.dir);
            if out.starts_with(&input) || input.starts_with(&out) {
                return bad(format!(
                    "output directory {} overlaps input directory {}",
                    out.display(),
                    input.display()
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{HistogramMatchParams, MatchMode};

    const MINIMAL: &str = r#"
        [target]
        dir = "kits"
        [output]
        dir = "out"
    "#;

    fn parse(text: &str) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::parse(text, false)?;
        c.resolve_paths(Path::new("/data"));
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn presets_parse() {
        let d1 = PipelineConfig::dataset1(Path::new("/data")).unwrap();
        assert_eq!(d1.harmonization, Harmonization::MomentShift);
        assert_eq!(d1.effective_stages(), Stage::ORDER.to_vec());
        assert_eq!(d1.clip_config(), ClipConfig::default());
        assert_eq!(d1.resample_spec().target_spacing, [0.7636; 3]);
        assert!(d1.target.dir.starts_with("/data"));
        let d2 = PipelineConfig::dataset2(Path::new("/data")).unwrap();
        match d2.harmonization {
            Harmonization::HistogramMatch(p) => {
                assert_eq!(p.bins, 4096);
                assert_eq!(p.mode, MatchMode::PerVolume);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn minimal_config_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert!(c.effective_stages().is_empty());
        assert_eq!(c.target.volumes, "volumes/*.nii.gz");
        assert_eq!(c.target.vocabulary, Vocabulary::kits());
        assert_eq!(c.output.dir, PathBuf::from("/data/out"));
        assert_eq!(c.output.datatype, DataType::Float32);
    }

    #[test]
    fn normalize_before_harmonize_rejected() {
        let text = format!(
            "stages = [\"normalize\", \"harmonize\"]\n{MINIMAL}\n[source]\ndir = \"kipa\"\n[harmonization]\nmethod = \"moment_shift\"\n"
        );
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("cannot run after"), "{err}");
    }

    #[test]
    fn histogram_params_parse() {
        let text = format!(
            "{MINIMAL}\n[source]\ndir = \"kipa\"\n[harmonization]\nmethod = \"histogram_match\"\nbins = 512\nmode = \"pooled\"\n"
        );
        let c = parse(&text).unwrap();
        assert_eq!(
            c.harmonization,
            Harmonization::HistogramMatch(HistogramMatchParams {
                bins: 512,
                mode: MatchMode::Pooled,
                reference_subsample: None
            })
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let overlap = "[target]\ndir = \"kits\"\n[output]\ndir = \"kits/out\"\n";
        assert!(parse(overlap).is_err());
        let same = "[target]\ndir = \"a/../kits\"\n[output]\ndir = \"kits\"\n";
        assert!(parse(same).is_err());
        assert!(parse(&format!("{MINIMAL}\n[clip]\nlo_pct = 60.0\nhi_pct = 50.0\n")).is_err());
        assert!(parse(&format!("{MINIMAL}\n[harmonization]\nmethod = \"moment_shift\"\n")).is_err());
        let err = parse(&format!("statistics_mask = \"foreground\"\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("requires labels"), "{err}");
        assert!(parse(&format!("bogus = 1\n{MINIMAL}")).is_err());
        assert!(parse(&format!("{MINIMAL}\n[resample]\nintensity_order = 2\n")).is_err());
    }

    #[test]
    fn json_config() {
        let text = r#"{"target": {"dir": "kits"}, "output": {"dir": "out", "datatype": "int16"}, "normalize": true}"#;
        let c = PipelineConfig::parse(text, true).unwrap();
        assert_eq!(c.effective_stages(), vec![Stage::Normalize]);
        assert_eq!(c.output.datatype, DataType::Int16);
    }
}
