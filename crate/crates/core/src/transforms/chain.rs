//! Percentile clipping and z-score normalization.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{percentile_in_place, pooled_values, DatasetStats, Selection};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipScope {
    /// One pair of thresholds over the whole dataset.
    #[default]
    Pooled,
    /// Thresholds computed per volume.
    PerVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub struct Clipped {
    pub volumes: Vec<Volume>,
    /// Thresholds applied to each volume, in input order.
    pub thresholds: Vec<Thresholds>,
}

fn thresholds_of(values: &mut [f64], lo_pct: f64, hi_pct: f64) -> Result<Thresholds> {
    let lo = percentile_in_place(values, lo_pct)?;
    let hi = percentile_in_place(values, hi_pct)?;
    if lo == hi {
        warn!("percentile clip: degenerate data, thresholds coincide at {lo}");
    }
    Ok(Thresholds { lo, hi })
}

/// Clips intensities to the `[lo_pct, hi_pct]` percentile range
/// (inclusive-interpolation convention). Values already inside the range are
/// left untouched.
pub fn clip_percentiles(
    volumes: &[Volume],
    lo_pct: f64,
    hi_pct: f64,
    scope: ClipScope,
    selection: Option<&Selection<'_>>,
) -> Result<Clipped> {
    if volumes.is_empty() {
        return Err(Error::Empty("no volumes to clip".into()));
    }
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidArgument(format!(
            "clip percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    let thresholds = match scope {
        ClipScope::Pooled => {
            let mut values = pooled_values(volumes, selection)?;
            vec![thresholds_of(&mut values, lo_pct, hi_pct)?; volumes.len()]
        }
        ClipScope::PerVolume => (0..volumes.len())
            .into_par_iter()
            .map(|i| {
                let one = std::slice::from_ref(&volumes[i]);
                let sel = selection.map(|s| Selection {
                    labels: std::slice::from_ref(&s.labels[i]),
                    rule: s.rule,
                });
                if let Some(s) = selection {
                    if s.labels.len() != volumes.len() {
                        return Err(Error::InvalidArgument("one mask per volume required".into()));
                    }
                }
                let mut values = pooled_values(one, sel.as_ref())?;
                thresholds_of(&mut values, lo_pct, hi_pct)
            })
            .collect::<Result<_>>()?,
    };
    let volumes = volumes
        .iter()
        .zip(&thresholds)
        .map(|(v, t)| v.map_values(|x| x.clamp(t.lo, t.hi)))
        .collect::<Result<_>>()?;
    Ok(Clipped { volumes, thresholds })
}

/// `x ↦ (x − mean) / std` voxelwise.
pub fn znormalize(volumes: &[Volume], stats: &DatasetStats) -> Result<Vec<Volume>> {
    if !(stats.std.is_finite() && stats.std > 0.0) {
        return Err(Error::DegenerateStd(stats.std));
    }
    let (mean, std) = (stats.mean, stats.std);
    volumes.iter().map(|v| v.map_values(|x| (x - mean) / std)).collect()
}
