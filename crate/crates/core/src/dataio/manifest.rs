use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::filter::Split;
use crate::error::{Error, Result};

/// One video of a corpus manifest. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub keypoints: String,
    pub lip: Option<String>,
    pub subtitle: String,
    pub lang: String,
    pub split: Split,
    /// Audio-aligned track used as the alignment prior, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_subtitle: Option<String>,
}

/// One isolated-sign clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolatedEntry {
    pub keypoints: String,
    pub lip: Option<String>,
    pub label: usize,
    pub gloss: String,
    pub split: Split,
}

pub fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_manifest<T: Serialize>(path: &Path, entries: &[T]) -> Result<()> {
    let mut s = serde_json::to_string_pretty(entries)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

/// Gloss vocabulary: one gloss per line, index = line number.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}

pub fn write_vocab(path: &Path, glosses: &[String]) -> Result<()> {
    let mut s = glosses.join("\n");
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
