//! Synthetic CT-like volumes with ellipsoidal label classes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{self, DataType};
use crate::volume::{Geometry, LabelMap, Vocabulary, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub mean: f64,
    pub std: f64,
    pub weight: f64,
}

/// One ellipsoid per volume, axis-aligned. Centers are fractions of each
/// dimension (`center = f · dim` in voxel index units); radii are in voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidClass {
    pub label: u16,
    pub name: String,
    pub center_range: [[f64; 2]; 3],
    pub radius_range: [[f64; 2]; 3],
    /// Intensity inside the ellipsoid, replacing the background.
    pub intensity: GaussianComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub count: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub case_prefix: String,
    pub background: Vec<GaussianComponent>,
    #[serde(default)]
    pub classes: Vec<EllipsoidClass>,
    #[serde(default = "default_datatype")]
    pub datatype: DataType,
}

fn default_prefix() -> String {
    "case".into()
}

fn default_datatype() -> DataType {
    DataType::Float32
}

fn sphere_class(label: u16, name: &str, center: [f64; 2], radius: [f64; 2], mean: f64) -> EllipsoidClass {
    EllipsoidClass {
        label,
        name: name.into(),
        center_range: [center; 3],
        radius_range: [radius; 3],
        intensity: GaussianComponent {
            mean,
            std: 20.0,
            weight: 1.0,
        },
    }
}

/// Elongated along z, off-center in x.
fn vessel_class(label: u16, name: &str, x: [f64; 2], mean: f64) -> EllipsoidClass {
    EllipsoidClass {
        label,
        name: name.into(),
        center_range: [x, [0.45, 0.55], [0.5, 0.5]],
        radius_range: [[0.02, 0.03], [0.02, 0.03], [0.3, 0.4]],
        intensity: GaussianComponent {
            mean,
            std: 25.0,
            weight: 1.0,
        },
    }
}

impl PhantomSpec {
    /// Target-domain preset: air and soft-tissue modes near −1000 and 0 HU;
    /// ten 64³ volumes.
    pub fn target_preset() -> Self {
        Self::target_preset_sized(10, [64, 64, 64])
    }

    pub fn target_preset_sized(count: usize, dims: [usize; 3]) -> Self {
        let mut spec = Self {
            count,
            dims,
            spacing: [0.8, 0.8, 1.0],
            seed: 1,
            case_prefix: "target".into(),
            background: vec![
                GaussianComponent {
                    mean: -1000.0,
                    std: 30.0,
                    weight: 0.35,
                },
                GaussianComponent {
                    mean: 0.0,
                    std: 45.0,
                    weight: 0.45,
                },
                GaussianComponent {
                    mean: 60.0,
                    std: 20.0,
                    weight: 0.2,
                },
            ],
            classes: Vec::new(),
            datatype: DataType::Float32,
        };
        spec.classes = spec.scaled_classes(vec![
            sphere_class(1, "kidney", [0.4, 0.6], [0.12, 0.18], 160.0),
            sphere_class(2, "tumor", [0.45, 0.55], [0.05, 0.08], 90.0),
            sphere_class(3, "cyst", [0.45, 0.55], [0.02, 0.04], 10.0),
        ]);
        spec
    }

    /// Source-domain preset: intensities concentrated between 800 and 1500,
    /// with kidney, tumor, artery and vein classes; ten 64³ volumes.
    pub fn source_preset() -> Self {
        Self::source_preset_sized(10, [64, 64, 64])
    }

    pub fn source_preset_sized(count: usize, dims: [usize; 3]) -> Self {
        let mut spec = Self {
            count,
            dims,
            spacing: [0.7, 0.7, 0.8],
            seed: 2,
            case_prefix: "source".into(),
            background: vec![
                GaussianComponent {
                    mean: 1000.0,
                    std: 50.0,
                    weight: 0.7,
                },
                GaussianComponent {
                    mean: 1250.0,
                    std: 70.0,
                    weight: 0.3,
                },
            ],
            classes: Vec::new(),
            datatype: DataType::Float32,
        };
        spec.classes = spec.scaled_classes(vec![
            sphere_class(1, "kidney", [0.4, 0.6], [0.12, 0.18], 1320.0),
            sphere_class(2, "tumor", [0.45, 0.55], [0.05, 0.08], 1280.0),
            vessel_class(3, "artery", [0.3, 0.35], 1420.0),
            vessel_class(4, "vein", [0.65, 0.7], 1380.0),
        ]);
        spec
    }

    /// Radii in the presets are given as fractions of the smallest dim.
    fn scaled_classes(&self, classes: Vec<EllipsoidClass>) -> Vec<EllipsoidClass> {
        let d = *self.dims.iter().min().unwrap() as f64;
        classes
            .into_iter()
            .map(|mut c| {
                for r in &mut c.radius_range {
                    *r = [(r[0] * d).max(1.0), (r[1] * d).max(1.0)];
                }
                c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("phantom: {m}")));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        if self.background.is_empty() {
            return bad("background mixture is empty".into());
        }
        for g in self.background.iter().chain(self.classes.iter().map(|c| &c.intensity)) {
            if !(g.mean.is_finite() && g.std.is_finite() && g.std >= 0.0 && g.weight >= 0.0) {
                return bad(format!("invalid Gaussian component {g:?}"));
            }
        }
        let total: f64 = self.background.iter().map(|g| g.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("background weights sum to {total}, not 1"));
        }
        for c in &self.classes {
            if c.label == 0 {
                return bad(format!("class `{}` uses the background label", c.name));
            }
            for a in 0..3 {
                let (cr, rr) = (c.center_range[a], c.radius_range[a]);
                // Written so that NaN bounds also fail.
                let ordered = |lo: f64, hi: f64| lo <= hi;
                if !ordered(cr[0], cr[1]) || !ordered(rr[0], rr[1]) || !ordered(f64::MIN_POSITIVE, rr[0]) {
                    return bad(format!("class `{}` has an invalid range on axis {a}", c.name));
                }
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.classes.iter().map(|c| (c.label, c.name.clone())).collect()
    }

    pub fn case_id(&self, i: usize) -> String {
        format!("{}_{i:03}", self.case_prefix)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn sample_mixture(rng: &mut ChaCha8Rng, mixture: &[(f64, Normal<f64>)]) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (w, n) in mixture {
        acc += w;
        if u < acc {
            return n.sample(rng);
        }
    }
    mixture.last().unwrap().1.sample(rng)
}

/// Voxels whose index lies inside the axis-aligned ellipsoid.
pub fn ellipsoid_contains(center: [f64; 3], radii: [f64; 3], voxel: [usize; 3]) -> bool {
    (0..3)
        .map(|a| ((voxel[a] as f64 - center[a]) / radii[a]).powi(2))
        .sum::<f64>()
        <= 1.0
}

/// Generates volume `index` of the series. Each volume has its own RNG
/// stream, so generation order and thread count do not matter.
pub fn generate_phantom(spec: &PhantomSpec, index: usize) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let geometry = Geometry::new(spec.dims, spec.spacing, [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let normal = |g: &GaussianComponent| Normal::new(g.mean, g.std).map_err(|e| Error::InvalidArgument(e.to_string()));
    let mixture: Vec<(f64, Normal<f64>)> = spec
        .background
        .iter()
        .map(|g| Ok((g.weight, normal(g)?)))
        .collect::<Result<_>>()?;

    // Higher labels paint last and win overlaps.
    let mut classes: Vec<&EllipsoidClass> = spec.classes.iter().collect();
    classes.sort_by_key(|c| c.label);
    let mut shapes = Vec::with_capacity(classes.len());
    for c in &classes {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            let [c0, c1] = c.center_range[a];
            let [r0, r1] = c.radius_range[a];
            center[a] = if c0 == c1 { c0 } else { rng.random_range(c0..c1) } * spec.dims[a] as f64;
            radii[a] = if r0 == r1 { r0 } else { rng.random_range(r0..r1) };
        }
        shapes.push((c.label, center, radii, normal(&c.intensity)?));
    }

    let mut data = Vec::with_capacity(geometry.len());
    let mut labels = Vec::with_capacity(geometry.len());
    for i in 0..geometry.len() {
        let v = geometry.coords(i);
        let background = sample_mixture(&mut rng, &mixture);
        let mut value = background;
        let mut label = 0;
        for (l, center, radii, dist) in &shapes {
            if ellipsoid_contains(*center, *radii, v) {
                label = *l;
                value = dist.sample(&mut rng);
            }
        }
        data.push(value);
        labels.push(label);
    }
    Ok((
        Volume::new(geometry, data)?,
        LabelMap::new(geometry, labels, spec.vocabulary())?,
    ))
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub id: String,
    pub volume: PathBuf,
    pub labels: PathBuf,
}

/// Writes `volumes/<id>.nii.gz` and `labels/<id>.nii.gz` under `dir`.
pub fn generate_phantoms(spec: &PhantomSpec, dir: impl AsRef<Path>) -> Result<Vec<PhantomCase>> {
    spec.validate()?;
    let dir = dir.as_ref();
    for sub in ["volumes", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let id = spec.case_id(i);
            let (volume, labels) = generate_phantom(spec, i)?;
            let case = PhantomCase {
                volume: dir.join("volumes").join(format!("{id}.nii.gz")),
                labels: dir.join("labels").join(format!("{id}.nii.gz")),
                id,
            };
            let volume = match spec.datatype {
                DataType::Float32 => volume,
                _ => volume.map_values(f64::round)?,
            };
            nifti::write_volume(&volume, &case.volume, spec.datatype)?;
            nifti::write_labels(&labels, &case.labels)?;
            Ok(case)
        })
        .collect()
}
