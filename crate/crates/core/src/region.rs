//! Named unions of label classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Mask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRegion")]
pub struct RegionSpec {
    pub name: String,
    pub labels: BTreeSet<u16>,
}

#[derive(Deserialize)]
struct RawRegion {
    name: String,
    labels: BTreeSet<u16>,
}

impl TryFrom<RawRegion> for RegionSpec {
    type Error = Error;

    fn try_from(raw: RawRegion) -> Result<Self> {
        RegionSpec::new(raw.name, raw.labels)
    }
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, labels: impl IntoIterator<Item = u16>) -> Result<Self> {
        let name = name.into();
        let labels: BTreeSet<u16> = labels.into_iter().collect();
        if labels.is_empty() {
            return Err(Error::InvalidArgument(format!("region `{name}` has no labels")));
        }
        Ok(Self { name, labels })
    }

    pub fn contains(&self, label: u16) -> bool {
        self.labels.contains(&label)
    }

    /// The five regions scored in the kidney challenge tables, over the
    /// KiTS vocabulary (1 kidney, 2 tumor, 3 cyst): kidney&masses, masses,
    /// tumor, kidney, cyst.
    pub fn kits_defaults() -> Vec<RegionSpec> {
        vec![
            RegionSpec::new("kidney_and_masses", [1, 2, 3]).unwrap(),
            RegionSpec::new("masses", [2, 3]).unwrap(),
            RegionSpec::new("tumor", [2]).unwrap(),
            RegionSpec::new("kidney", [1]).unwrap(),
            RegionSpec::new("cyst", [3]).unwrap(),
        ]
    }
}

/// Rejects region sets with duplicate names.
pub fn validate_regions(regions: &[RegionSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in regions {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate region name `{}`", r.name)));
        }
    }
    Ok(())
}

/// What to do when a region names a label missing from the map's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentLabels {
    #[default]
    Reject,
    Allow,
}

/// Voxel is set iff its label belongs to the region.
pub fn extract_region_mask(labels: &LabelMap, region: &RegionSpec, absent: AbsentLabels) -> Result<Mask> {
    if absent == AbsentLabels::Reject {
        if let Some(&label) = region.labels.iter().find(|&&l| !labels.vocabulary().contains(l)) {
            return Err(Error::UnknownLabel { label });
        }
    }
    let data = labels.data().iter().map(|&l| region.contains(l)).collect();
    Mask::new(*labels.geometry(), data)
}
