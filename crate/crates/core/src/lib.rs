//! Intensity harmonization and preprocessing for CT segmentation datasets.
//!
//! Volumes are read from NIfTI-1, harmonized onto a reference domain (moment
//! shift or histogram matching), clipped, z-normalized and resampled; label
//! maps are remapped and resampled alongside. Every stage is deterministic.

pub mod error;
pub mod evaluation;
pub mod histogram;
pub mod nifti;
pub mod pipeline;
pub mod region;
pub mod resample;
pub mod stats;
pub mod transforms;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, LabelMap, Mask, Vocabulary, Volume};
