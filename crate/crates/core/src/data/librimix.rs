//! Adapter for the LibriMix directory layout:
//!
//! ```text
//! <split>/mix_clean/<id>.wav
//! <split>/s1/<id>.wav
//! <split>/s2/<id>.wav
//! ```

use std::fs;
use std::path::Path;

use super::manifest::ManifestRecord;
use crate::error::{Error, Result};

/// Builds manifest records from a LibriMix split directory. Sources are
/// attached when both `s1/` and `s2/` hold a file of the same name. The
/// sample count comes from the WAV header.
pub fn librimix_records(split_dir: &Path) -> Result<Vec<ManifestRecord>> {
    let mix_dir = split_dir.join("mix_clean");
    let entries = fs::read_dir(&mix_dir).map_err(|e| Error::io(&mix_dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let mixture = mix_dir.join(&name);
            let reader = hound::WavReader::open(&mixture).map_err(|source| Error::Wav {
                path: mixture.clone(),
                source,
            })?;
            let samples = reader.duration() as usize;
            let s1 = split_dir.join("s1").join(&name);
            let s2 = split_dir.join("s2").join(&name);
            let sources = (s1.exists() && s2.exists()).then_some([s1, s2]);
            Ok(ManifestRecord {
                mixture,
                sources,
                samples,
            })
        })
        .collect()
}
