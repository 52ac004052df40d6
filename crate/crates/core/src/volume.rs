//! Volumes, label maps and binary masks on an axis-aligned voxel grid.
//!
//! All grids store their samples with x varying fastest and z slowest:
//! the sample at `(x, y, z)` lives at `x + nx * (y + ny * z)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid shape and placement in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let geometry = Self { dims, spacing, origin };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Geometry(format!("zero-sized dims {:?}", self.dims)));
        }
        if self
            .dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::Geometry(format!("dims {:?} overflow", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Geometry::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World position (mm) of a voxel center.
    pub fn world(&self, voxel: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + voxel[a] as f64 * self.spacing[a])
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }
}

/// A scalar intensity volume (HU).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Result<Self> {
        Self::new(geometry, vec![value; geometry.len()])
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..geometry.len()).map(|i| f(geometry.coords(i))).collect();
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Applies `f` voxelwise, keeping the geometry. Fails if `f` produces a
    /// non-finite value.
    pub fn map_values(&self, f: impl Fn(f64) -> f64 + Sync) -> Result<Volume> {
        use rayon::prelude::*;
        let data: Vec<f64> = self.data.par_iter().map(|&v| f(v)).collect();
        Volume::new(self.geometry, data)
    }
}

/// Mapping from label ID to class name. Label 0 (background) is always
/// implicitly present.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct Vocabulary(BTreeMap<u16, String>);

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Labels 1..=3 as kidney, tumor, cyst.
    pub fn kits() -> Self {
        [(1, "kidney"), (2, "tumor"), (3, "cyst")].into_iter().collect()
    }

    /// Labels 1..=4 as kidney, tumor, artery, vein.
    pub fn kipa() -> Self {
        [(1, "kidney"), (2, "tumor"), (3, "artery"), (4, "vein")]
            .into_iter()
            .collect()
    }

    pub fn insert(&mut self, label: u16, name: impl Into<String>) {
        self.0.insert(label, name.into());
    }

    pub fn contains(&self, label: u16) -> bool {
        label == 0 || self.0.contains_key(&label)
    }

    pub fn name(&self, label: u16) -> Option<&str> {
        match label {
            0 => self.0.get(&0).map(String::as_str).or(Some("background")),
            _ => self.0.get(&label).map(String::as_str),
        }
    }

    pub fn label_of(&self, name: &str) -> Option<u16> {
        self.0.iter().find(|(_, n)| *n == name).map(|(&l, _)| l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, &str)> {
        self.0.iter().map(|(&l, n)| (l, n.as_str()))
    }

    pub fn labels(&self) -> impl Iterator<Item = u16> + '_ {
        self.0.keys().copied()
    }
}

impl<S: Into<String>> FromIterator<(u16, S)> for Vocabulary {
    fn from_iter<I: IntoIterator<Item = (u16, S)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(l, n)| (l, n.into())).collect())
    }
}

impl TryFrom<BTreeMap<String, String>> for Vocabulary {
    type Error = String;

    fn try_from(raw: BTreeMap<String, String>) -> std::result::Result<Self, String> {
        raw.into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<u16>()
                    .map(|l| (l, v))
                    .map_err(|_| format!("vocabulary key `{k}` is not a label ID"))
            })
            .collect()
    }
}

impl From<Vocabulary> for BTreeMap<String, String> {
    fn from(v: Vocabulary) -> Self {
        v.0.into_iter().map(|(l, n)| (l.to_string(), n)).collect()
    }
}

/// A categorical segmentation on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    data: Vec<u16>,
    vocabulary: Vocabulary,
}

impl LabelMap {
    /// Builds a label map, rejecting any label not in `vocabulary`.
    pub fn new(geometry: Geometry, data: Vec<u16>, vocabulary: Vocabulary) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "label data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        let present: BTreeSet<u16> = data.iter().copied().collect();
        if let Some(&label) = present.iter().find(|&&l| !vocabulary.contains(l)) {
            return Err(Error::UnknownLabel { label });
        }
        Ok(Self {
            geometry,
            data,
            vocabulary,
        })
    }

    /// Builds a label map, adding a placeholder vocabulary entry for every
    /// label that is not already named.
    pub fn new_lenient(geometry: Geometry, data: Vec<u16>, mut vocabulary: Vocabulary) -> Result<Self> {
        let present: BTreeSet<u16> = data.iter().copied().collect();
        for label in present {
            if !vocabulary.contains(label) {
                vocabulary.insert(label, format!("label_{label}"));
            }
        }
        Self::new(geometry, data, vocabulary)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Distinct label values present in the data, including 0 if present.
    pub fn present_labels(&self) -> BTreeSet<u16> {
        self.data.iter().copied().collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn counts(&self) -> BTreeMap<u16, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.data {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geometry: Geometry,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.geometry.ensure_same(&other.geometry, "mask union")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Ok(Mask {
            geometry: self.geometry,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_x_fastest() {
        let g = Geometry::with_dims([3, 4, 5]).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, -2.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([usize::MAX, 2, 2], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn volume_rejects_wrong_length_and_nan() {
        let g = Geometry::with_dims([2, 2, 1]).unwrap();
        assert!(Volume::new(g, vec![0.0; 3]).is_err());
        let err = Volume::new(g, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
        assert!(Volume::new(g, vec![0.0, 1.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn label_map_checks_vocabulary() {
        let g = Geometry::with_dims([2, 2, 1]).unwrap();
        assert!(LabelMap::new(g, vec![0, 1, 2, 3], Vocabulary::kits()).is_ok());
        let err = LabelMap::new(g, vec![0, 1, 2, 7], Vocabulary::kits()).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { label: 7 }));
        let lenient = LabelMap::new_lenient(g, vec![0, 1, 2, 7], Vocabulary::kits()).unwrap();
        assert_eq!(lenient.vocabulary().name(7), Some("label_7"));
    }

    #[test]
    fn vocabulary_parses_string_keys() {
        let v: Vocabulary = serde_json::from_str(r#"{"1": "kidney", "2": "tumor"}"#).unwrap();
        assert_eq!(v.name(2), Some("tumor"));
        assert_eq!(v.label_of("kidney"), Some(1));
        assert!(serde_json::from_str::<Vocabulary>(r#"{"x": "kidney"}"#).is_err());
        let back = serde_json::to_string(&v).unwrap();
        assert_eq!(back, r#"{"1":"kidney","2":"tumor"}"#);
    }
}
