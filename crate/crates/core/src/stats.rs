//! Pooled dataset statistics.
//!
//! Moments use a corrected two-pass scheme with compensated (Neumaier)
//! summation: pass one fixes the mean, pass two accumulates squared
//! deviations together with the residual sum of deviations. Partial sums are
//! formed per volume and merged in input order, so results do not depend on
//! the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::RegionSpec;
use crate::volume::{LabelMap, Volume};

/// Compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.compensation);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Which voxels of a labelled volume count as foreground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Foreground {
    NonZero,
    Region(RegionSpec),
}

impl Foreground {
    #[inline]
    pub fn selects(&self, label: u16) -> bool {
        match self {
            Foreground::NonZero => label != 0,
            Foreground::Region(r) => r.contains(label),
        }
    }
}

/// Restricts statistics to foreground voxels, one label map per volume.
#[derive(Debug, Clone, Copy)]
pub struct Selection<'a> {
    pub labels: &'a [LabelMap],
    pub rule: &'a Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileValue {
    pub rank: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: u64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub percentiles: Vec<PercentileValue>,
}

impl DatasetStats {
    pub fn percentile(&self, rank: f64) -> Option<f64> {
        self.percentiles.iter().find(|p| p.rank == rank).map(|p| p.value)
    }
}

fn check_selection(volumes: &[Volume], selection: Option<&Selection<'_>>) -> Result<()> {
    if volumes.is_empty() {
        return Err(Error::Empty("no volumes supplied".into()));
    }
    if let Some(sel) = selection {
        if sel.labels.len() != volumes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks for {} volumes",
                sel.labels.len(),
                volumes.len()
            )));
        }
        for (i, (v, l)) in volumes.iter().zip(sel.labels).enumerate() {
            v.geometry().ensure_same(l.geometry(), &format!("mask {i}"))?;
        }
    }
    Ok(())
}

fn for_selected(volume: &Volume, labels: Option<(&LabelMap, &Foreground)>, mut f: impl FnMut(f64)) {
    match labels {
        None => volume.data().iter().for_each(|&x| f(x)),
        Some((l, rule)) => volume
            .data()
            .iter()
            .zip(l.data())
            .filter(|(_, &lab)| rule.selects(lab))
            .for_each(|(&x, _)| f(x)),
    }
}

fn labels_for<'a>(selection: Option<&Selection<'a>>, i: usize) -> Option<(&'a LabelMap, &'a Foreground)> {
    selection.map(|s| (&s.labels[i], s.rule))
}

/// Pooled values of all selected voxels, in volume order.
pub fn pooled_values(volumes: &[Volume], selection: Option<&Selection<'_>>) -> Result<Vec<f64>> {
    check_selection(volumes, selection)?;
    let mut out = Vec::new();
    for (i, v) in volumes.iter().enumerate() {
        for_selected(v, labels_for(selection, i), |x| out.push(x));
    }
    if out.is_empty() {
        return Err(Error::Empty("selection contains no voxels".into()));
    }
    Ok(out)
}

/// Inclusive-convention percentile (`rank = p / 100 * (n - 1)`, linear
/// interpolation between neighbouring order statistics). Reorders `values`.
pub fn percentile_in_place(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }
    let n = values.len();
    let rank = p / 100.0 * (n - 1) as f64;
    let k = (rank.floor() as usize).min(n - 1);
    let frac = rank - k as f64;
    let (_, &mut lo, upper) = values.select_nth_unstable_by(k, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Ok(lo);
    }
    let hi = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(lo + frac * (hi - lo))
}

/// Pooled count, mean, population std, extrema and the requested
/// percentiles over every (optionally masked) voxel.
pub fn compute_stats(
    volumes: &[Volume],
    selection: Option<&Selection<'_>>,
    percentiles: &[f64],
) -> Result<DatasetStats> {
    check_selection(volumes, selection)?;
    if let Some(&p) = percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }

    struct Partial {
        count: u64,
        sum: CompensatedSum,
        min: f64,
        max: f64,
    }
    let partials: Vec<Partial> = volumes
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut p = Partial {
                count: 0,
                sum: CompensatedSum::default(),
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            };
            for_selected(v, labels_for(selection, i), |x| {
                p.count += 1;
                p.sum.add(x);
                p.min = p.min.min(x);
                p.max = p.max.max(x);
            });
            p
        })
        .collect();

    let mut count = 0u64;
    let mut sum = CompensatedSum::default();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &partials {
        count += p.count;
        sum.merge(&p.sum);
        min = min.min(p.min);
        max = max.max(p.max);
    }
    if count == 0 {
        return Err(Error::Empty("selection contains no voxels".into()));
    }
    let mean = sum.value() / count as f64;

    let deviations: Vec<(CompensatedSum, CompensatedSum)> = volumes
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut sq = CompensatedSum::default();
            let mut lin = CompensatedSum::default();
            for_selected(v, labels_for(selection, i), |x| {
                let d = x - mean;
                sq.add(d * d);
                lin.add(d);
            });
            (sq, lin)
        })
        .collect();
    let mut sq = CompensatedSum::default();
    let mut lin = CompensatedSum::default();
    for (s, l) in &deviations {
        sq.merge(s);
        lin.merge(l);
    }
    let n = count as f64;
    let m2 = (sq.value() - lin.value() * lin.value() / n).max(0.0);
    // Sub-ulp residue of the mean can leave a tiny positive spread on
    // constant data.
    let std = if min == max { 0.0 } else { (m2 / n).sqrt() };

    let percentiles = if percentiles.is_empty() {
        Vec::new()
    } else {
        let mut values = pooled_values(volumes, selection)?;
        percentiles
            .iter()
            .map(|&rank| {
                let value = percentile_in_place(&mut values, rank)?.clamp(min, max);
                Ok(PercentileValue { rank, value })
            })
            .collect::<Result<_>>()?
    };

    Ok(DatasetStats {
        count,
        mean,
        std,
        min,
        max,
        percentiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Vocabulary};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(Geometry::with_dims(dims).unwrap(), data).unwrap()
    }

    /// Sort everything, sum naively in extended steps.
    fn oracle(values: &[f64], ps: &[f64]) -> (f64, f64, Vec<f64>) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = ps
            .iter()
            .map(|p| {
                let r = p / 100.0 * (n - 1.0);
                let lo = r.floor() as usize;
                let hi = r.ceil() as usize;
                sorted[lo] + (r - lo as f64) * (sorted[hi] - sorted[lo])
            })
            .collect();
        (mean, var.sqrt(), pct)
    }

    #[test]
    fn constant_volume() {
        let s = compute_stats(&[vol([4, 4, 4], vec![7.0; 64])], None, &[]).unwrap();
        assert_eq!(s.count, 64);
        assert_eq!(s.mean, 7.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn two_point_distribution() {
        let vs = [vol([1, 1, 2], vec![0.0, 0.0]), vol([1, 1, 2], vec![2.0, 2.0])];
        let s = compute_stats(&vs, None, &[50.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.percentile(50.0), Some(1.0));
    }

    #[test]
    fn matches_sort_and_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vs: Vec<Volume> = (0..100)
            .map(|_| vol([8, 8, 8], (0..512).map(|_| rng.random_range(-1200.0..1800.0)).collect()))
            .collect();
        let ps = [0.0, 0.5, 25.0, 50.0, 99.5, 100.0];
        let s = compute_stats(&vs, None, &ps).unwrap();
        let all: Vec<f64> = vs.iter().flat_map(|v| v.data().to_vec()).collect();
        let (mean, std, pct) = oracle(&all, &ps);
        assert_eq!(s.count, 51_200);
        assert!((s.mean - mean).abs() <= 1e-9 * mean.abs());
        assert!((s.std - std).abs() <= 1e-9 * std);
        for (got, want) in s.percentiles.iter().zip(&pct) {
            assert!(
                (got.value - want).abs() <= 1e-9 * want.abs().max(1.0),
                "{got:?} vs {want}"
            );
        }
        assert_eq!(s.min, pct[0]);
        assert_eq!(s.max, pct[5]);
    }

    #[test]
    fn stable_with_large_offset() {
        // Single-pass sum of squares loses all digits here.
        let base = 1e9;
        let data: Vec<f64> = (0..1000).map(|i| base + (i % 2) as f64).collect();
        let s = compute_stats(&[vol([1000, 1, 1], data)], None, &[]).unwrap();
        assert!((s.std - 0.5).abs() < 1e-9, "{}", s.std);
        assert!((s.mean - (base + 0.5)).abs() < 1e-6);
    }

    #[test]
    fn masked_selection() {
        let g = Geometry::with_dims([4, 1, 1]).unwrap();
        let v = Volume::new(g, vec![1.0, 2.0, 3.0, 100.0]).unwrap();
        let l = LabelMap::new(g, vec![0, 1, 1, 0], Vocabulary::kits()).unwrap();
        let labels = [l];
        let rule = Foreground::NonZero;
        let sel = Selection {
            labels: &labels,
            rule: &rule,
        };
        let s = compute_stats(std::slice::from_ref(&v), Some(&sel), &[]).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.mean, 2.5);

        let none = Foreground::Region(RegionSpec::new("cyst", [3]).unwrap());
        let sel = Selection {
            labels: &labels,
            rule: &none,
        };
        assert!(matches!(
            compute_stats(std::slice::from_ref(&v), Some(&sel), &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn error_paths() {
        assert!(matches!(compute_stats(&[], None, &[]), Err(Error::Empty(_))));
        let v = vol([2, 1, 1], vec![0.0, 1.0]);
        let l = LabelMap::new(Geometry::with_dims([1, 2, 1]).unwrap(), vec![0, 1], Vocabulary::kits()).unwrap();
        let labels = [l];
        let rule = Foreground::NonZero;
        let sel = Selection {
            labels: &labels,
            rule: &rule,
        };
        assert!(matches!(
            compute_stats(std::slice::from_ref(&v), Some(&sel), &[]),
            Err(Error::GeometryMismatch(_))
        ));
        assert!(compute_stats(std::slice::from_ref(&v), None, &[101.0]).is_err());
    }

    fn dataset() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-2000.0f64..3000.0, 1..40), 1..6)
    }

    proptest! {
        #[test]
        fn permutation_invariant(data in dataset(), seed in any::<u64>()) {
            let vs: Vec<Volume> = data.iter().map(|d| vol([d.len(), 1, 1], d.clone())).collect();
            let a = compute_stats(&vs, None, &[0.5, 50.0, 99.5]).unwrap();

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled: Vec<Vec<f64>> = data.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            for d in &mut shuffled { d.shuffle(&mut rng); }
            let ws: Vec<Volume> = shuffled.iter().map(|d| vol([d.len(), 1, 1], d.clone())).collect();
            let b = compute_stats(&ws, None, &[0.5, 50.0, 99.5]).unwrap();

            prop_assert_eq!(a.count, b.count);
            prop_assert!((a.mean - b.mean).abs() <= 1e-9 * a.mean.abs().max(1.0));
            prop_assert!((a.std - b.std).abs() <= 1e-9 * a.std.max(1.0));
            prop_assert_eq!(a.percentiles, b.percentiles);
            prop_assert!(a.std >= 0.0);
        }

        #[test]
        fn shift_moves_mean_only(data in dataset(), c in -5000.0f64..5000.0) {
            let vs: Vec<Volume> = data.iter().map(|d| vol([d.len(), 1, 1], d.clone())).collect();
            let shifted: Vec<Volume> = vs.iter().map(|v| v.map_values(|x| x + c).unwrap()).collect();
            let a = compute_stats(&vs, None, &[]).unwrap();
            let b = compute_stats(&shifted, None, &[]).unwrap();
            let scale = a.mean.abs() + c.abs() + a.std + 1.0;
            prop_assert!((b.mean - (a.mean + c)).abs() <= 1e-9 * scale);
            prop_assert!((b.std - a.std).abs() <= 1e-9 * scale);
        }

        #[test]
        fn percentiles_within_extrema(data in dataset(), p in 0.0f64..=100.0) {
            let vs: Vec<Volume> = data.iter().map(|d| vol([d.len(), 1, 1], d.clone())).collect();
            let s = compute_stats(&vs, None, &[p]).unwrap();
            let v = s.percentile(p).unwrap();
            prop_assert!(s.min <= v && v <= s.max);
            let total: usize = data.iter().map(Vec::len).sum();
            prop_assert_eq!(s.count as usize, total);
        }
    }
}
