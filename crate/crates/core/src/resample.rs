//! Separable resampling onto a new voxel spacing.
//!
//! Intensities use cubic B-spline interpolation (recursive prefilter, pole
//! `√3 − 2`), or linear / nearest on request. Labels always use nearest
//! neighbor. Voxel `(0, 0, 0)` keeps its world position; output voxel `j`
//! along an axis sits at input index `j · target / spacing`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume};

pub const DEFAULT_TARGET_SPACING: f64 = 0.7636;

const POLE: f64 = -0.267_949_192_431_122_7; // √3 − 2
/// Samples added on each side in `Boundary::Extrapolate` mode; the mirror
/// artifact at the original edge is damped by `|POLE|^PAD`.
const PAD: usize = 12;
/// Samples at each end used to fit the extrapolating cubic.
const FIT_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Extend each line by a least-squares cubic fitted to its end samples,
    /// then prefilter with mirror conditions. Cubics are reproduced up to the
    /// edge.
    #[default]
    Extrapolate,
    /// Whole-sample mirror conditions directly on the data.
    Mirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleSpec {
    pub target_spacing: [f64; 3],
    pub intensity_order: u8,
    pub label_order: u8,
    pub boundary: Boundary,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        Self {
            target_spacing: [DEFAULT_TARGET_SPACING; 3],
            intensity_order: 3,
            label_order: 0,
            boundary: Boundary::default(),
        }
    }
}

impl ResampleSpec {
    pub fn isotropic(spacing: f64) -> Self {
        Self {
            target_spacing: [spacing; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "target spacing must be positive, got {:?}",
                self.target_spacing
            )));
        }
        if ![0, 1, 3].contains(&self.intensity_order) {
            return Err(Error::InvalidArgument(format!(
                "intensity order must be 0, 1 or 3, got {}",
                self.intensity_order
            )));
        }
        // Any other order would invent values between label IDs.
        if self.label_order != 0 {
            return Err(Error::InvalidArgument(format!(
                "label order must be 0, got {}",
                self.label_order
            )));
        }
        Ok(())
    }

    /// Output geometry for `input`: dims rounded half away from zero, at
    /// least 1; origin kept.
    pub fn output_geometry(&self, input: &Geometry) -> Result<Geometry> {
        self.validate()?;
        let mut dims = [0; 3];
        for (a, dim) in dims.iter_mut().enumerate() {
            let d = (input.dims[a] as f64 * input.spacing[a] / self.target_spacing[a]).round();
            if !d.is_finite() || d > u32::MAX as f64 {
                return Err(Error::InvalidArgument(format!("output dimension {d} along axis {a}")));
            }
            *dim = (d as usize).max(1);
        }
        Geometry::new(dims, self.target_spacing, input.origin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Nearest,
    Linear,
    Cubic(Boundary),
}

/// Applies `kernel` along `axis`, producing `m` samples at input positions
/// `j * step`.
fn resample_axis(
    data: &[f64],
    dims: [usize; 3],
    axis: usize,
    m: usize,
    step: f64,
    kernel: Kernel,
) -> (Vec<f64>, [usize; 3]) {
    let n = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = m;
    if n == m && step == 1.0 {
        return (data.to_vec(), dims);
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let out_strides = [1, out_dims[0], out_dims[0] * out_dims[1]];
    let (oa, ob) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let positions: Vec<f64> = (0..m).map(|j| j as f64 * step).collect();
    let lines: Vec<(usize, usize)> = (0..dims[ob]).flat_map(|b| (0..dims[oa]).map(move |a| (a, b))).collect();

    let results: Vec<Vec<f64>> = lines
        .par_iter()
        .map_init(
            || Vec::with_capacity(n + 2 * PAD),
            |buf, &(a, b)| {
                let base = a * strides[oa] + b * strides[ob];
                buf.clear();
                buf.extend((0..n).map(|i| data[base + i * strides[axis]]));
                interpolate_line(buf, &positions, kernel)
            },
        )
        .collect();

    let mut out = vec![0.0; out_dims.iter().product()];
    for (&(a, b), line) in lines.iter().zip(results) {
        let base = a * out_strides[oa] + b * out_strides[ob];
        for (j, v) in line.into_iter().enumerate() {
            out[base + j * out_strides[axis]] = v;
        }
    }
    (out, out_dims)
}

/// Nearest sample index, ties toward the larger index.
#[inline]
fn nearest_index(u: f64, n: usize) -> usize {
    ((u + 0.5).floor().max(0.0) as usize).min(n - 1)
}

fn interpolate_line(line: &mut Vec<f64>, positions: &[f64], kernel: Kernel) -> Vec<f64> {
    let n = line.len();
    match kernel {
        Kernel::Nearest => positions.iter().map(|&u| line[nearest_index(u, n)]).collect(),
        Kernel::Linear => positions
            .iter()
            .map(|&u| {
                if n == 1 {
                    return line[0];
                }
                let u = u.clamp(0.0, (n - 1) as f64);
                let i = (u.floor() as usize).min(n - 2);
                let t = u - i as f64;
                line[i] * (1.0 - t) + line[i + 1] * t
            })
            .collect(),
        Kernel::Cubic(boundary) => {
            let offset = match boundary {
                Boundary::Mirror => 0,
                Boundary::Extrapolate => {
                    pad_with_cubic(line);
                    PAD
                }
            };
            bspline_prefilter(line);
            positions
                .iter()
                .map(|&u| eval_bspline(line, u + offset as f64))
                .collect()
        }
    }
}

/// Least-squares cubic through the first (or last) samples, in local
/// coordinates `t = 0, 1, …`. Returns the coefficients `c0..c3`.
fn fit_cubic(samples: &[f64]) -> [f64; 4] {
    let k = samples.len();
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (t, &y) in samples.iter().enumerate() {
        let t = t as f64 - (k - 1) as f64 / 2.0;
        let row = [1.0, t, t * t, t * t * t];
        for r in 0..4 {
            atb[r] += row[r] * y;
            for c in 0..4 {
                ata[r][c] += row[r] * row[c];
            }
        }
    }
    solve4(ata, atb)
}

/// Gaussian elimination with partial pivoting on a 4×4 system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            let pivot = a[col];
            for (x, p) in a[r][col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn eval_local_cubic(c: &[f64; 4], k: usize, t: f64) -> f64 {
    let t = t - (k - 1) as f64 / 2.0;
    c[0] + t * (c[1] + t * (c[2] + t * c[3]))
}

/// Extends `line` (length ≥ 4) by `PAD` samples on each side.
fn pad_with_cubic(line: &mut Vec<f64>) {
    let n = line.len();
    let k = n.min(FIT_SAMPLES);
    let left = fit_cubic(&line[..k]);
    let right = fit_cubic(&line[n - k..]);
    let mut padded = Vec::with_capacity(n + 2 * PAD);
    padded.extend((0..PAD).map(|i| eval_local_cubic(&left, k, i as f64 - PAD as f64)));
    padded.extend_from_slice(line);
    padded.extend((0..PAD).map(|i| eval_local_cubic(&right, k, (k + i) as f64)));
    *line = padded;
}

/// In-place conversion of samples to cubic B-spline coefficients under
/// whole-sample mirror boundary conditions.
fn bspline_prefilter(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= gain;
    }
    // Exact causal initialization for the mirrored infinite sequence.
    let z2n = z.powi(2 * n as i32 - 2);
    let mut zk = z;
    let mut z2nk = z2n / z;
    let mut sum = c[0] + z.powi(n as i32 - 1) * c[n - 1];
    for v in &c[1..n - 1] {
        sum += (zk + z2nk) * v;
        zk *= z;
        z2nk /= z;
    }
    c[0] = sum / (1.0 - z2n);
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

fn eval_bspline(c: &[f64], x: f64) -> f64 {
    let n = c.len();
    let i = x.floor();
    let t = x - i;
    let i = i as isize;
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        (1.0 - t) * (1.0 - t) * (1.0 - t) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ];
    (0..4).map(|k| w[k] * c[mirror(i - 1 + k as isize, n)]).sum()
}

fn kernel_for(order: u8, boundary: Boundary, n: usize, axis: usize) -> Kernel {
    match order {
        0 => Kernel::Nearest,
        1 => Kernel::Linear,
        _ if n < 4 => {
            warn!("resample: axis {axis} has {n} samples, using linear interpolation");
            Kernel::Linear
        }
        _ => Kernel::Cubic(boundary),
    }
}

fn resample_data(data: &[f64], input: &Geometry, output: &Geometry, order: u8, boundary: Boundary) -> Vec<f64> {
    let mut dims = input.dims;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let step = output.spacing[axis] / input.spacing[axis];
        let kernel = kernel_for(order, boundary, dims[axis], axis);
        (cur, dims) = resample_axis(&cur, dims, axis, output.dims[axis], step, kernel);
    }
    cur
}

pub fn resample_volume(volume: &Volume, spec: &ResampleSpec) -> Result<Volume> {
    let output = spec.output_geometry(volume.geometry())?;
    let data = resample_data(
        volume.data(),
        volume.geometry(),
        &output,
        spec.intensity_order,
        spec.boundary,
    );
    Volume::new(output, data)
}

/// Nearest-neighbor resampling; the vocabulary is carried over.
pub fn resample_labels(labels: &LabelMap, spec: &ResampleSpec) -> Result<LabelMap> {
    let input = labels.geometry();
    let output = spec.output_geometry(input)?;
    let index = |axis: usize| -> Vec<usize> {
        let step = output.spacing[axis] / input.spacing[axis];
        (0..output.dims[axis])
            .map(|j| nearest_index(j as f64 * step, input.dims[axis]))
            .collect()
    };
    let (ix, iy, iz) = (index(0), index(1), index(2));
    let src = labels.data();
    let plane = output.dims[0] * output.dims[1];
    let mut data = vec![0u16; output.len()];
    data.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        for (y, row) in slab.chunks_mut(output.dims[0]).enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = src[input.index(ix[x], iy[y], iz[z])];
            }
        }
    });
    LabelMap::new(output, data, labels.vocabulary().clone())
}
