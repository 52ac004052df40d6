use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Behaviour outside the breakpoint range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutOfRange {
    /// Hold the end values.
    Clamp,
    /// Continue the first/last segment.
    Linear,
}

/// Monotone piecewise-linear value mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMap")]
pub struct IntensityMap {
    breakpoints: Vec<f64>,
    outputs: Vec<f64>,
    policy: OutOfRange,
}

#[derive(Deserialize)]
struct RawMap {
    breakpoints: Vec<f64>,
    outputs: Vec<f64>,
    policy: OutOfRange,
}

impl TryFrom<RawMap> for IntensityMap {
    type Error = Error;

    fn try_from(raw: RawMap) -> Result<Self> {
        IntensityMap::new(raw.breakpoints, raw.outputs, raw.policy)
    }
}

impl IntensityMap {
    pub fn new(breakpoints: Vec<f64>, outputs: Vec<f64>, policy: OutOfRange) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::InvalidMap("no breakpoints".into()));
        }
        if breakpoints.len() != outputs.len() {
            return Err(Error::InvalidMap(format!(
                "{} breakpoints but {} outputs",
                breakpoints.len(),
                outputs.len()
            )));
        }
        if breakpoints.iter().chain(&outputs).any(|v| !v.is_finite()) {
            return Err(Error::InvalidMap("non-finite breakpoint or output".into()));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidMap("breakpoints must be strictly increasing".into()));
        }
        if outputs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidMap("outputs must be non-decreasing".into()));
        }
        if policy == OutOfRange::Linear && breakpoints.len() < 2 {
            return Err(Error::InvalidMap("linear extension needs two breakpoints".into()));
        }
        Ok(Self {
            breakpoints,
            outputs,
            policy,
        })
    }

    pub fn identity() -> Self {
        Self::new(vec![0.0, 1.0], vec![0.0, 1.0], OutOfRange::Linear).unwrap()
    }

    /// `x ↦ slope * (x - x0) + y0` on the whole real line.
    pub fn affine(x0: f64, y0: f64, slope: f64) -> Result<Self> {
        if !(slope.is_finite() && slope >= 0.0) {
            return Err(Error::InvalidMap(format!(
                "slope {slope} is not a finite non-negative value"
            )));
        }
        Self::new(vec![x0, x0 + 1.0], vec![y0, y0 + slope], OutOfRange::Linear)
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![value], OutOfRange::Clamp)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn policy(&self) -> OutOfRange {
        self.policy
    }

    #[inline]
    fn segment(&self, i: usize, x: f64) -> f64 {
        let (x0, x1) = (self.breakpoints[i], self.breakpoints[i + 1]);
        let (y0, y1) = (self.outputs[i], self.outputs[i + 1]);
        y0 + (x - x0) * ((y1 - y0) / (x1 - x0))
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.breakpoints.len();
        if n == 1 {
            return self.outputs[0];
        }
        if x <= self.breakpoints[0] {
            return match self.policy {
                OutOfRange::Clamp => self.outputs[0],
                OutOfRange::Linear => self.segment(0, x),
            };
        }
        if x >= self.breakpoints[n - 1] {
            return match self.policy {
                OutOfRange::Clamp => self.outputs[n - 1],
                OutOfRange::Linear => {
                    let slope = (self.outputs[n - 1] - self.outputs[n - 2])
                        / (self.breakpoints[n - 1] - self.breakpoints[n - 2]);
                    self.outputs[n - 1] + (x - self.breakpoints[n - 1]) * slope
                }
            };
        }
        let k = self.breakpoints.partition_point(|&b| b <= x);
        // Rounding must not step past the segment end values.
        self.segment(k - 1, x).clamp(self.outputs[k - 1], self.outputs[k])
    }

    /// True when every breakpoint maps to itself and the ends extend linearly.
    pub fn is_identity(&self) -> bool {
        self.policy == OutOfRange::Linear && self.breakpoints == self.outputs
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Maps every voxel independently; geometry is unchanged.
pub fn apply_map(volume: &Volume, map: &IntensityMap) -> Result<Volume> {
    if map.is_identity() {
        return Ok(volume.clone());
    }
    volume.map_values(|x| map.eval(x))
}
