//! Fitting the two harmonization transforms: moment shift (affine, matches
//! pooled mean and standard deviation) and histogram matching (source CDF
//! composed with the reference quantile function).

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::map::{apply_map, IntensityMap, OutOfRange};
use crate::error::{Error, Result};
use crate::histogram::{histogram_of, padded_range, value_range, Histogram};
use crate::stats::{compute_stats, DatasetStats};
use crate::volume::Volume;

pub const DEFAULT_MATCH_BINS: usize = 4096;

/// Affine map `x ↦ (x − μ_src) / σ_src · σ_tgt + μ_tgt`, extended linearly
/// over the whole real line.
pub fn fit_moment_shift(source: &DatasetStats, target: &DatasetStats) -> Result<IntensityMap> {
    if !(source.std.is_finite() && source.std > 0.0) {
        return Err(Error::DegenerateStd(source.std));
    }
    if !(target.std.is_finite() && target.std >= 0.0) {
        return Err(Error::DegenerateStd(target.std));
    }
    if !(source.mean.is_finite() && target.mean.is_finite()) {
        return Err(Error::InvalidArgument("non-finite mean".into()));
    }
    let (lo, hi) = (source.mean - source.std, source.mean + source.std);
    if lo >= hi {
        // σ below the resolution of μ.
        return Err(Error::DegenerateStd(source.std));
    }
    IntensityMap::new(
        vec![lo, hi],
        vec![target.mean - target.std, target.mean + target.std],
        OutOfRange::Linear,
    )
}

/// Lower quantile `inf { x : F(x) ≥ p }` of a piecewise-linear CDF given at
/// the edges; flat stretches resolve to their left end.
fn quantile(edges: &[f64], cdf: &[f64], p: f64) -> f64 {
    if p <= 0.0 {
        return edges[0];
    }
    let k = cdf.partition_point(|&c| c < p).min(cdf.len() - 1);
    if k == 0 {
        return edges[0];
    }
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    if c1 <= c0 {
        return edges[k - 1];
    }
    let t = ((p - c0) / (c1 - c0)).min(1.0);
    edges[k - 1] + t * (edges[k] - edges[k - 1])
}

/// Histogram matching map `x ↦ Q_ref(F_src(x))`.
///
/// Breakpoints are the source edges plus every point where the source CDF
/// crosses a reference knot level, so the map is exactly the composition of
/// the two piecewise-linear functions. Values outside the source range are
/// clamped. A reference with a single occupied bin yields a constant map to
/// that bin's center.
pub fn fit_histogram_match(source: &Histogram, reference: &Histogram) -> Result<IntensityMap> {
    if source.bins() != reference.bins() {
        return Err(Error::InvalidArgument(format!(
            "source has {} bins but reference has {}",
            source.bins(),
            reference.bins()
        )));
    }
    let src_cdf = source.cdf_at_edges()?;
    let ref_cdf = reference.cdf_at_edges()?;

    if reference.occupied_bins() == 1 {
        let bin = reference.counts().iter().position(|&c| c > 0).unwrap();
        warn!("histogram match: reference occupies a single bin; mapping everything to its center");
        return IntensityMap::constant(reference.bin_center(bin));
    }

    let edges = source.edges();
    let mut knots: Vec<(f64, f64)> = edges.iter().copied().zip(src_cdf.iter().copied()).collect();
    let mut i = 0;
    for &level in ref_cdf.iter().filter(|&&c| c > 0.0 && c < 1.0) {
        while i + 1 < src_cdf.len() && src_cdf[i + 1] <= level {
            i += 1;
        }
        if i + 1 >= src_cdf.len() {
            break;
        }
        let (c0, c1) = (src_cdf[i], src_cdf[i + 1]);
        if c0 < level && level < c1 {
            let x = edges[i] + (level - c0) / (c1 - c0) * (edges[i + 1] - edges[i]);
            knots.push((x, level));
        }
    }
    knots.sort_by(|a, b| a.0.total_cmp(&b.0));
    knots.dedup_by(|b, a| a.0 == b.0);

    let mut breakpoints = Vec::with_capacity(knots.len());
    let mut outputs: Vec<f64> = Vec::with_capacity(knots.len());
    let mut level = 0.0f64;
    for (x, p) in knots {
        level = level.max(p);
        let y = quantile(reference.edges(), &ref_cdf, level);
        let y = outputs.last().map_or(y, |&prev| y.max(prev));
        breakpoints.push(x);
        outputs.push(y);
    }
    IntensityMap::new(breakpoints, outputs, OutOfRange::Clamp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// One source CDF per volume.
    #[default]
    PerVolume,
    /// One source CDF over the pooled source dataset.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramMatchParams {
    pub bins: usize,
    pub mode: MatchMode,
    /// Cap on reference voxels used for the reference CDF; drawn with the
    /// run seed.
    pub reference_subsample: Option<usize>,
}

impl Default for HistogramMatchParams {
    fn default() -> Self {
        Self {
            bins: DEFAULT_MATCH_BINS,
            mode: MatchMode::PerVolume,
            reference_subsample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Harmonization {
    #[default]
    None,
    MomentShift,
    HistogramMatch(HistogramMatchParams),
}

impl Harmonization {
    pub fn name(&self) -> &'static str {
        match self {
            Harmonization::None => "none",
            Harmonization::MomentShift => "moment_shift",
            Harmonization::HistogramMatch(_) => "histogram_match",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedMaps {
    None,
    Shared(IntensityMap),
    PerVolume(Vec<IntensityMap>),
}

impl FittedMaps {
    pub fn for_volume(&self, i: usize) -> Option<&IntensityMap> {
        match self {
            FittedMaps::None => None,
            FittedMaps::Shared(m) => Some(m),
            FittedMaps::PerVolume(ms) => ms.get(i),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Harmonized {
    pub volumes: Vec<Volume>,
    pub maps: FittedMaps,
}

/// Pooled reference histogram over the target dataset, spanning its
/// [min, max].
pub fn reference_histogram(target: &[Volume], params: &HistogramMatchParams, seed: u64) -> Result<Histogram> {
    let (lo, hi) = value_range(target)?;
    let (lo, hi) = padded_range(lo, hi);
    let total: usize = target.iter().map(Volume::len).sum();
    match params.reference_subsample {
        Some(0) => Err(Error::InvalidArgument("reference_subsample must be positive".into())),
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = rand::seq::index::sample(&mut rng, total, k).into_vec();
            picks.sort_unstable();
            let mut values = Vec::with_capacity(k);
            let (mut base, mut vi) = (0usize, 0usize);
            for idx in picks {
                while idx >= base + target[vi].len() {
                    base += target[vi].len();
                    vi += 1;
                }
                values.push(target[vi].data()[idx - base]);
            }
            histogram_of(&values, lo, hi, params.bins)
        }
        _ => crate::histogram::build_histogram(target, lo, hi, params.bins),
    }
}

fn own_histogram(volumes: &[Volume], bins: usize) -> Result<Histogram> {
    let (lo, hi) = value_range(volumes)?;
    let (lo, hi) = padded_range(lo, hi);
    crate::histogram::build_histogram(volumes, lo, hi, bins)
}

/// Fits and applies the chosen harmonization to every source volume.
pub fn harmonize_dataset(
    source: &[Volume],
    target: &[Volume],
    method: &Harmonization,
    seed: u64,
) -> Result<Harmonized> {
    if source.is_empty() {
        return Err(Error::Empty("no source volumes".into()));
    }
    match method {
        Harmonization::None => Ok(Harmonized {
            volumes: source.to_vec(),
            maps: FittedMaps::None,
        }),
        Harmonization::MomentShift => {
            let src = compute_stats(source, None, &[])?;
            let tgt = compute_stats(target, None, &[])?;
            let map = fit_moment_shift(&src, &tgt)?;
            let volumes = source.iter().map(|v| apply_map(v, &map)).collect::<Result<_>>()?;
            Ok(Harmonized {
                volumes,
                maps: FittedMaps::Shared(map),
            })
        }
        Harmonization::HistogramMatch(params) => {
            if params.bins == 0 {
                return Err(Error::InvalidArgument("bins must be positive".into()));
            }
            let reference = reference_histogram(target, params, seed)?;
            match params.mode {
                MatchMode::Pooled => {
                    let map = fit_histogram_match(&own_histogram(source, params.bins)?, &reference)?;
                    let volumes = source.iter().map(|v| apply_map(v, &map)).collect::<Result<_>>()?;
                    Ok(Harmonized {
                        volumes,
                        maps: FittedMaps::Shared(map),
                    })
                }
                MatchMode::PerVolume => {
                    let fitted: Vec<(IntensityMap, Volume)> = source
                        .par_iter()
                        .map(|v| {
                            let h = own_histogram(std::slice::from_ref(v), params.bins)?;
                            let map = fit_histogram_match(&h, &reference)?;
                            let out = apply_map(v, &map)?;
                            Ok((map, out))
                        })
                        .collect::<Result<_>>()?;
                    let (maps, volumes) = fitted.into_iter().unzip();
                    Ok(Harmonized {
                        volumes,
                        maps: FittedMaps::PerVolume(maps),
                    })
                }
            }
        }
    }
}
