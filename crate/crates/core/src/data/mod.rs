//! Datasets on disk: feature files, annotations, manifests, the synthetic
//! benchmark generator and summary statistics.

mod io;
mod stats;
mod synth;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::moment::{AnnotationRecord, ClipFeatureSequence};

pub use io::{load_dataset, read_annotations, read_features, write_annotations, write_features, MANIFEST_FILE};
pub use stats::{dataset_stats, DatasetStats};
pub use synth::{generate, oracle_rank1, Hardness, SynthInfo, SyntheticConfig, SYNTH_INFO_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One video listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    /// Path of the feature file, relative to the manifest's directory.
    pub feature_file: String,
    pub split: Split,
}

/// `manifest.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    /// Annotation file (JSON lines), relative to the manifest's directory.
    pub annotations: String,
}

/// A query paired with its video.
#[derive(Debug, Clone)]
pub struct Sample {
    pub query_id: String,
    pub split: Split,
    pub video: Arc<ClipFeatureSequence>,
    pub annotation: AnnotationRecord,
}

/// A validated, fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<Arc<ClipFeatureSequence>>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}
