//! On-disk corpus layout and the feature cache.
//!
//! ```text
//! <dir>/recordings.jsonl   {"id", "path", "metadata"} per line, path relative to <dir>
//! <dir>/tags.jsonl         one TagSegment per line
//! <dir>/audio/<id>.wav
//! ```
//!
//! The feature cache is a JSONL file of labelled samples with their feature
//! vectors, produced by `extract` and consumed by `train` and `trials`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wingbeat_core::dataset::{label_recordings, LabeledSample, Recording, RecordingMetadata, TagSegment};
use wingbeat_core::dsp::{DspConfig, FeatureExtractor, CANONICAL_RATE_HZ};
use wingbeat_core::ClassId;

use crate::audio::{read_wav, write_wav};
use crate::error::{io_err, Error, Result};
use crate::fsutil::{read_jsonl, write_jsonl};

pub const RECORDINGS_FILE: &str = "recordings.jsonl";
pub const TAGS_FILE: &str = "tags.jsonl";
pub const AUDIO_DIR: &str = "audio";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub metadata: RecordingMetadata,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub recordings: Vec<Recording>,
    pub tags: Vec<TagSegment>,
}

/// Loads every recording (resampled to the canonical rate) and the tags.
/// A missing tags file means no tags.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let entries: Vec<RecordingEntry> = read_jsonl(&dir.join(RECORDINGS_FILE))?;
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = entries.iter().find(|e| !seen.insert(e.id.as_str())) {
        return Err(Error::Format {
            path: dir.join(RECORDINGS_FILE),
            message: format!("duplicate recording id `{}`", dup.id),
        });
    }
    let recordings = entries
        .into_par_iter()
        .map(|e| {
            let audio = read_wav(&dir.join(&e.path))?;
            let audio = if audio.sample_rate_hz() == CANONICAL_RATE_HZ {
                audio
            } else {
                audio.resample_linear(CANONICAL_RATE_HZ)?
            };
            Ok(Recording {
                id: e.id,
                audio,
                metadata: e.metadata,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tags_path = dir.join(TAGS_FILE);
    let tags = if tags_path.exists() {
        read_jsonl(&tags_path)?
    } else {
        Vec::new()
    };
    Ok(Corpus { recordings, tags })
}

pub fn write_corpus(dir: &Path, recordings: &[Recording], tags: &[TagSegment]) -> Result<()> {
    let audio_dir = dir.join(AUDIO_DIR);
    std::fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    recordings
        .par_iter()
        .map(|r| write_wav(&audio_dir.join(format!("{}.wav", r.id)), &r.audio))
        .collect::<Result<()>>()?;
    let entries: Vec<RecordingEntry> = recordings
        .iter()
        .map(|r| RecordingEntry {
            id: r.id.clone(),
            path: Path::new(AUDIO_DIR).join(format!("{}.wav", r.id)),
            metadata: r.metadata.clone(),
        })
        .collect();
    write_jsonl(&dir.join(RECORDINGS_FILE), &entries)?;
    write_jsonl(&dir.join(TAGS_FILE), tags)
}

/// Labels every clip from the tags and attaches its feature vector.
/// Returns the samples and the number of discarded clips.
pub fn featurize(corpus: &Corpus, background: &ClassId, dsp: &DspConfig) -> Result<(Vec<LabeledSample>, usize)> {
    let outcome = label_recordings(&corpus.recordings, &corpus.tags, background)?;
    for d in &outcome.discarded {
        tracing::debug!(clip = %d.window.clip_id(), reason = %d.reason, "clip discarded");
    }
    let extractor = FeatureExtractor::new(dsp.clone(), CANONICAL_RATE_HZ)?;
    let by_id: std::collections::HashMap<&str, &Recording> =
        corpus.recordings.iter().map(|r| (r.id.as_str(), r)).collect();
    let len = extractor.clip_len();
    let samples = outcome
        .samples
        .into_par_iter()
        .map(|mut s| {
            let rec = by_id[s.recording_id.as_str()];
            let clip = rec.audio.slice(s.clip_start_sample, s.clip_start_sample + len);
            s.feature = Some(extractor.extract(&clip)?);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, outcome.discarded.len()))
}

pub fn write_features(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    write_jsonl(path, samples)
}

/// Reads a feature cache; every sample must carry a feature of one dimension.
pub fn read_features(path: &Path) -> Result<Vec<LabeledSample>> {
    let samples: Vec<LabeledSample> = read_jsonl(path)?;
    let mut dim = None;
    for (i, s) in samples.iter().enumerate() {
        let d = s.feature().map_err(|e| Error::Line {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match dim {
            None => dim = Some(d.dimension()),
            Some(expected) if expected != d.dimension() => {
                return Err(Error::Line {
                    path: path.into(),
                    line: i + 1,
                    message: format!("feature dimension {} differs from {expected}", d.dimension()),
                })
            }
            _ => {}
        }
    }
    Ok(samples)
}
