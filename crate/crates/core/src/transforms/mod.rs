//! Intensity transforms (harmonization, clipping, normalization) and label
//! remapping.

mod chain;
mod harmonize;
mod labels;
mod map;

pub use chain::{clip_percentiles, znormalize, ClipScope, Clipped, Thresholds};
pub use harmonize::{
    fit_histogram_match, fit_moment_shift, harmonize_dataset, reference_histogram, FittedMaps, Harmonization,
    Harmonized, HistogramMatchParams, MatchMode, DEFAULT_MATCH_BINS,
};
pub use labels::{remap_labels, LabelRemap};
pub use map::{apply_map, IntensityMap, OutOfRange};
