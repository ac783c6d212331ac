use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::subtitles::Cue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub keypoints: PathBuf,
    pub lip: Option<PathBuf>,
    pub cue: Cue,
    pub lang: String,
    pub split: Split,
}

/// Admission bounds, inclusive on both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub max_words: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_seconds: 1.0,
            max_seconds: 20.0,
            max_words: 80,
        }
    }
}

// Cue times carry millisecond resolution; this absorbs the rounding of
// end - start so that e.g. 20.000 s is admitted.
const TIME_SLACK: f64 = 1e-9;

pub fn admits(cue: &Cue, cfg: &FilterConfig) -> bool {
    let d = cue.duration();
    d + TIME_SLACK >= cfg.min_seconds
        && d <= cfg.max_seconds + TIME_SLACK
        && cue.text.split_whitespace().count() <= cfg.max_words
}

/// Order-preserving subset of admitted records.
pub fn filter_samples(records: &[SampleRecord], cfg: &FilterConfig) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| admits(&r.cue, cfg))
        .cloned()
        .collect()
}
