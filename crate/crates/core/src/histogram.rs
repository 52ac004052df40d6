//! Pooled intensity histograms, CDF distances between them, and plot-data
//! emission.
//!
//! Bins are half-open `[e_i, e_{i+1})` except the last, which is closed.
//! CDFs are piecewise linear across bin edges and built from in-range counts
//! only; under/overflow is tracked separately.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
    underflow: u64,
    overflow: u64,
    #[serde(skip)]
    uniform: bool,
}

impl Histogram {
    pub fn new(edges: Vec<f64>, counts: Vec<u64>, underflow: u64, overflow: u64) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "histogram edges must be finite and strictly increasing".into(),
            ));
        }
        if counts.len() + 1 != edges.len() {
            return Err(Error::InvalidArgument(format!(
                "{} counts for {} edges",
                counts.len(),
                edges.len()
            )));
        }
        Ok(Self {
            edges,
            counts,
            underflow,
            overflow,
            uniform: false,
        })
    }

    /// Empty histogram with `bins` equal-width bins over `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!("invalid histogram range [{lo}, {hi}]")));
        }
        if bins == 0 {
            return Err(Error::InvalidArgument("bins must be positive".into()));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
        edges.push(hi);
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "range [{lo}, {hi}] too narrow for {bins} bins"
            )));
        }
        Ok(Self {
            edges,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
            uniform: true,
        })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn underflow(&self) -> u64 {
        self.underflow
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    /// In-range sample count.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_width(&self, bin: usize) -> f64 {
        self.edges[bin + 1] - self.edges[bin]
    }

    pub fn max_bin_width(&self) -> f64 {
        (0..self.bins()).map(|i| self.bin_width(i)).fold(0.0, f64::max)
    }

    pub fn bin_center(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Bin holding `x`, or `None` outside `[lo, hi]`.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        let (lo, hi) = (self.lo(), self.hi());
        if !(x >= lo && x <= hi) {
            return None;
        }
        let last = self.bins() - 1;
        let mut i = if self.uniform {
            (((x - lo) / (hi - lo)) * self.bins() as f64)
                .floor()
                .clamp(0.0, last as f64) as usize
        } else {
            self.edges.partition_point(|&e| e <= x).saturating_sub(1).min(last)
        };
        // Settle onto the stored edges so values on an edge go right.
        while i > 0 && x < self.edges[i] {
            i -= 1;
        }
        while i < last && x >= self.edges[i + 1] {
            i += 1;
        }
        Some(i)
    }

    pub fn add(&mut self, x: f64) {
        match self.bin_of(x) {
            Some(i) => self.counts[i] += 1,
            None if x < self.lo() => self.underflow += 1,
            None => self.overflow += 1,
        }
    }

    /// Adds another histogram's counts. Edges must match exactly.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::InvalidArgument(
                "cannot merge histograms with different edges".into(),
            ));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        Ok(())
    }

    /// CDF at each edge (length `bins + 1`, from 0 to 1). Requires a
    /// non-empty histogram.
    pub fn cdf_at_edges(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("histogram has no in-range samples".into()));
        }
        let mut running = 0u64;
        let mut cdf = Vec::with_capacity(self.edges.len());
        cdf.push(0.0);
        for &c in &self.counts {
            running += c;
            cdf.push(running as f64 / total as f64);
        }
        Ok(cdf)
    }

    /// Per-bin density normalized by all samples, in-range or not.
    pub fn density(&self) -> Vec<f64> {
        let all = (self.total() + self.underflow + self.overflow) as f64;
        (0..self.bins())
            .map(|i| {
                if all == 0.0 {
                    0.0
                } else {
                    self.counts[i] as f64 / (all * self.bin_width(i))
                }
            })
            .collect()
    }
}

/// Piecewise-linear CDF evaluation from edge knots.
pub(crate) fn eval_cdf(edges: &[f64], cdf: &[f64], x: f64) -> f64 {
    if x <= edges[0] {
        return 0.0;
    }
    if x >= edges[edges.len() - 1] {
        return 1.0;
    }
    let k = edges.partition_point(|&e| e <= x);
    let (e0, e1) = (edges[k - 1], edges[k]);
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    c0 + (x - e0) / (e1 - e0) * (c1 - c0)
}

/// Pooled minimum and maximum over all voxels.
pub fn value_range(volumes: &[Volume]) -> Result<(f64, f64)> {
    if volumes.is_empty() {
        return Err(Error::Empty("no volumes supplied".into()));
    }
    Ok(volumes
        .par_iter()
        .map(|v| {
            v.data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                })
        })
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY),
            |a, b| (a.0.min(b.0), a.1.max(b.1)),
        ))
}

/// Widens a degenerate `[x, x]` range so that it can hold a histogram.
pub fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn histogram_of(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    let template = Histogram::uniform(lo, hi, bins)?;
    Ok(values
        .par_chunks(1 << 16)
        .map(|chunk| {
            let mut h = template.clone();
            chunk.iter().for_each(|&x| h.add(x));
            h
        })
        .reduce(
            || template.clone(),
            |mut a, b| {
                a.merge(&b).expect("shared edges");
                a
            },
        ))
}

/// Pooled histogram over every voxel of every volume.
pub fn build_histogram(volumes: &[Volume], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    if volumes.is_empty() {
        return Err(Error::Empty("no volumes supplied".into()));
    }
    let template = Histogram::uniform(lo, hi, bins)?;
    let mut pooled = template.clone();
    for h in volumes
        .par_iter()
        .map(|v| histogram_of(v.data(), lo, hi, bins))
        .collect::<Result<Vec<_>>>()?
    {
        pooled.merge(&h)?;
    }
    Ok(pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfDistance {
    /// Largest absolute CDF difference.
    pub ks: f64,
    /// Integral of the absolute CDF difference (1-Wasserstein), in HU.
    pub emd: f64,
}

/// KS and 1-Wasserstein distances between two piecewise-linear histogram
/// CDFs, evaluated exactly on the union of both edge sets.
pub fn cdf_distance(a: &Histogram, b: &Histogram) -> Result<CdfDistance> {
    let ca = a.cdf_at_edges()?;
    let cb = b.cdf_at_edges()?;
    let mut grid: Vec<f64> = a.edges.iter().chain(&b.edges).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let diff: Vec<f64> = grid
        .iter()
        .map(|&x| eval_cdf(&a.edges, &ca, x) - eval_cdf(&b.edges, &cb, x))
        .collect();
    let ks = diff.iter().fold(0.0f64, |m, d| m.max(d.abs())).min(1.0);
    let mut emd = 0.0;
    for (w, d) in grid.windows(2).zip(diff.windows(2)) {
        let h = w[1] - w[0];
        let (d0, d1) = (d[0].abs(), d[1].abs());
        emd += if d[0] * d[1] >= 0.0 {
            0.5 * (d0 + d1) * h
        } else {
            // Linear difference crosses zero inside the interval.
            0.5 * h * (d0 * d0 + d1 * d1) / (d0 + d1)
        };
    }
    Ok(CdfDistance { ks, emd })
}

/// Distance between two datasets, each histogrammed with `bins` bins over
/// their common value range.
pub fn dataset_distance(a: &[Volume], b: &[Volume], bins: usize) -> Result<CdfDistance> {
    let (alo, ahi) = value_range(a)?;
    let (blo, bhi) = value_range(b)?;
    let (lo, hi) = padded_range(alo.min(blo), ahi.max(bhi));
    cdf_distance(&build_histogram(a, lo, hi, bins)?, &build_histogram(b, lo, hi, bins)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub series: String,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
    pub density: f64,
}

pub fn plot_rows(histograms: &BTreeMap<String, Histogram>) -> Vec<PlotRow> {
    histograms
        .iter()
        .flat_map(|(name, h)| {
            let density = h.density();
            (0..h.bins()).map(move |i| PlotRow {
                series: name.clone(),
                bin_left: h.edges[i],
                bin_right: h.edges[i + 1],
                count: h.counts[i],
                density: density[i],
            })
        })
        .collect()
}

/// Writes `series,bin_left,bin_right,count,density` rows, ordered by series
/// name then bin index.
pub fn emit_plot_data(histograms: &BTreeMap<String, Histogram>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for row in plot_rows(histograms) {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// JSON mirror of [`emit_plot_data`].
pub fn emit_plot_json(histograms: &BTreeMap<String, Histogram>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(&plot_rows(histograms))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_plot_data(path: impl AsRef<Path>) -> Result<Vec<PlotRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
