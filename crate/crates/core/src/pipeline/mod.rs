//! Config-driven dataset construction: load, remap, harmonize, clip,
//! normalize, resample, write.

mod config;
mod manifest;
pub mod phantom;
mod run;

pub use config::{
    ClipConfig, DatasetConfig, OutputConfig, PipelineConfig, Stage, StatisticsMask, DATASET1_PRESET, DATASET2_PRESET,
};
pub use manifest::{
    combined_digest, sha256_hex, ClipRecord, HarmonizationRecord, InputRecord, Manifest, NormalizationRecord,
    OutputRecord, Role,
};
pub use phantom::{generate_phantom, generate_phantoms, EllipsoidClass, GaussianComponent, PhantomCase, PhantomSpec};
pub use run::{case_id, discover, run_pipeline, DISTANCE_BINS};
