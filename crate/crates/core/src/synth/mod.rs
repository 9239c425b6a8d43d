//! Synthetic knee radiographs paired with score records.

mod dataset;
mod pgm;
mod render;

use thiserror::Error;

use crate::score::{Feature, Site};

pub use dataset::{
    generate_dataset, load_images, read_manifest, synthesize, write_manifest, Dataset, DatasetManifest, ManifestEntry,
    Split, SplitRatios,
};
pub use pgm::{dequantize, quantize, quantized, read_pgm, write_pgm};
pub use render::{
    ground_truth_region, render_image, FeatureSite, GroundTruthRegion, Mask, SynthConfig, SynthImage, BACKGROUND, BONE,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("feature absent: {0:?} at {1:?}")]
    FeatureAbsent(Feature, Site),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SynthError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        SynthError::Io { path: path.display().to_string(), source }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, SynthError::Io { .. })
    }
}
