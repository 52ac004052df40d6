use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, Stage};
use crate::error::{Error, Result};
use crate::histogram::CdfDistance;
use crate::resample::ResampleSpec;
use crate::stats::DatasetStats;
use crate::transforms::{ClipScope, Thresholds};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub id: String,
    pub role: Role,
    pub volume: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationRecord {
    pub method: String,
    /// Case ID → fitted map, relative to the output directory.
    pub maps: BTreeMap<String, String>,
    /// Histogram bins used for the distances below.
    pub distance_bins: usize,
    /// Source vs target before harmonization.
    pub distance_before: CdfDistance,
    /// Harmonized source vs target.
    pub distance_after: CdfDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub scope: ClipScope,
    pub thresholds: BTreeMap<String, Thresholds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub id: String,
    pub role: Role,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub volume: String,
    /// SHA-256 of the stored data array (header and compression excluded).
    pub volume_sha256: String,
    pub labels: Option<String>,
    pub labels_sha256: Option<String>,
}

/// Record of one pipeline run. Contains nothing run-dependent beyond the
/// configuration and inputs, so identical runs give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub config: PipelineConfig,
    pub inputs: Vec<InputRecord>,
    /// Pooled statistics keyed by checkpoint name.
    pub stats: BTreeMap<String, DatasetStats>,
    pub harmonization: Option<HarmonizationRecord>,
    pub clip: Option<ClipRecord>,
    pub normalization: Option<NormalizationRecord>,
    pub resample: Option<ResampleSpec>,
    pub outputs: Vec<OutputRecord>,
    /// SHA-256 over every output digest, in output order.
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Combined digest over the per-file digests.
pub fn combined_digest(outputs: &[OutputRecord]) -> String {
    let mut h = Sha256::new();
    for o in outputs {
        h.update(o.id.as_bytes());
        h.update([0]);
        h.update(o.volume_sha256.as_bytes());
        h.update([0]);
        h.update(o.labels_sha256.as_deref().unwrap_or("").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE_NAME);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn stat(&self, key: &str) -> Option<&DatasetStats> {
        self.stats.get(key)
    }
}
