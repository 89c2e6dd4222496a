use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Summary statistics of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub queries: usize,
    pub mean_words_per_query: f64,
    pub mean_moments_per_video: f64,
    pub mean_moment_duration_s: f64,
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    let queries = dataset.samples.len();
    let videos = dataset.videos.len();
    if queries == 0 || videos == 0 {
        return Err(Error::Config("dataset has no annotations".into()));
    }
    let words: usize = dataset.samples.iter().map(|s| s.annotation.tokens.len()).sum();
    let seconds: f64 = dataset.samples.iter().map(|s| s.annotation.span.length()).sum();
    Ok(DatasetStats {
        videos,
        queries,
        mean_words_per_query: words as f64 / queries as f64,
        mean_moments_per_video: queries as f64 / videos as f64,
        mean_moment_duration_s: seconds / queries as f64,
    })
}
