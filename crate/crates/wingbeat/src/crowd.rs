//! Crowd export and vote ingestion.
//!
//! Export writes, for every clip the model flags, `audio/<clip_id>.wav`,
//! `spectrograms/<clip_id>.png` and one manifest line. Ingestion reads votes
//! as JSONL `{"clip_id", "volunteer_id", "says_mosquito", "cast_at"}` with an
//! RFC 3339 `cast_at`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wingbeat_core::crowdsource::{
    aggregate_votes, labels_to_tags, select_positive_clips, AggregatedLabel, AggregationConfig, ClipRef, ManifestEntry,
    VolunteerVote,
};
use wingbeat_core::dataset::{segment_recording, Recording, TagSegment};
use wingbeat_core::dsp::{spectrogram_image, CLIP_DURATION_S};
use wingbeat_core::pipeline::TwoStageModel;

use crate::audio::{write_png, write_wav};
use crate::error::{io_err, Error, Result};
use crate::fsutil::{read_jsonl, write_jsonl};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    #[serde(flatten)]
    pub entry: ManifestEntry,
    pub clip_end_s: f64,
    pub audio_path: PathBuf,
    pub spectrogram_path: PathBuf,
}

#[derive(Debug, Default)]
pub struct ExportOutcome {
    pub manifest: Vec<ManifestLine>,
    /// Recordings that failed, with the reason; the others are still exported.
    pub failures: Vec<(String, String)>,
}

/// Exports every positive clip of `recordings` into `out`.
/// `padding_s` widens the exported audio on both sides, clamped to the recording.
pub fn export(
    model: &TwoStageModel,
    recordings: &[Recording],
    out: &Path,
    model_version: &str,
    padding_s: f64,
) -> Result<ExportOutcome> {
    if padding_s.is_nan() || padding_s < 0.0 {
        return Err(Error::Usage(format!("padding must be non-negative, got {padding_s}")));
    }
    let audio_dir = out.join("audio");
    let spec_dir = out.join("spectrograms");
    for d in [&audio_dir, &spec_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let per_recording: Vec<std::result::Result<Vec<ManifestLine>, (String, String)>> = recordings
        .par_iter()
        .map(|rec| {
            export_recording(model, rec, out, model_version, padding_s).map_err(|e| (rec.id.clone(), e.to_string()))
        })
        .collect();
    let mut outcome = ExportOutcome::default();
    for r in per_recording {
        match r {
            Ok(lines) => outcome.manifest.extend(lines),
            Err((id, reason)) => {
                tracing::warn!(recording = %id, %reason, "export failed");
                outcome.failures.push((id, reason));
            }
        }
    }
    write_jsonl(&out.join(MANIFEST_FILE), &outcome.manifest)?;
    Ok(outcome)
}

fn export_recording(
    model: &TwoStageModel,
    rec: &Recording,
    out: &Path,
    model_version: &str,
    padding_s: f64,
) -> Result<Vec<ManifestLine>> {
    let rate = rec.audio.sample_rate_hz() as f64;
    let pad = (padding_s * rate).round() as usize;
    let mut lines = Vec::new();
    for clip in select_positive_clips(model, rec)? {
        let w = &clip.window;
        let id = w.clip_id();
        let audio_path = PathBuf::from("audio").join(format!("{id}.wav"));
        let spectrogram_path = PathBuf::from("spectrograms").join(format!("{id}.png"));
        let start = w.start_sample.saturating_sub(pad);
        let end = (w.start_sample + w.len + pad).min(rec.audio.len());
        write_wav(&out.join(&audio_path), &rec.audio.slice(start, end))?;
        let image = spectrogram_image(&w.audio(&rec.audio), &model.dsp_config)?;
        write_png(&out.join(&spectrogram_path), &image)?;
        lines.push(ManifestLine {
            entry: ManifestEntry {
                clip_id: id,
                recording_id: rec.id.clone(),
                clip_start_s: w.start_s(),
                stage1_score: clip.detection.stage1_score,
                model_version: model_version.to_string(),
            },
            clip_end_s: w.end_s(),
            audio_path,
            spectrogram_path,
        });
    }
    Ok(lines)
}

/// Vote as submitted by the tagging front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub clip_id: String,
    pub volunteer_id: String,
    pub says_mosquito: bool,
    pub cast_at: String,
}

pub fn read_votes(path: &Path) -> Result<Vec<VolunteerVote>> {
    let records: Vec<VoteRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let at = chrono::DateTime::parse_from_rfc3339(&r.cast_at).map_err(|e| Error::Line {
                path: path.into(),
                line: i + 1,
                message: format!("cast_at `{}`: {e}", r.cast_at),
            })?;
            Ok(VolunteerVote {
                clip_id: r.clip_id,
                volunteer_id: r.volunteer_id,
                says_mosquito: r.says_mosquito,
                cast_at_ms: at.timestamp_millis(),
            })
        })
        .collect()
}

/// Index from clip id to clip position over every clip of `recordings`.
pub fn clip_index(recordings: &[Recording]) -> BTreeMap<String, ClipRef> {
    recordings
        .iter()
        .flat_map(|r| segment_recording(r, CLIP_DURATION_S))
        .map(|w| (w.clip_id(), ClipRef::from(&w)))
        .collect()
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub labels: Vec<AggregatedLabel>,
    pub tags: Vec<TagSegment>,
    /// Clip ids in the votes that the index does not know.
    pub unknown_clips: Vec<String>,
}

/// Aggregates votes and turns mosquito labels into crowd tags. Votes for
/// unknown clips are aggregated but produce no tags.
pub fn ingest(
    votes: &[VolunteerVote],
    index: &BTreeMap<String, ClipRef>,
    config: &AggregationConfig,
) -> Result<IngestOutcome> {
    let unknown: BTreeSet<String> = votes
        .iter()
        .filter(|v| !index.contains_key(&v.clip_id))
        .map(|v| v.clip_id.clone())
        .collect();
    for id in &unknown {
        tracing::warn!(clip = %id, "vote for unknown clip");
    }
    let labels = aggregate_votes(votes, config)?;
    let known: Vec<AggregatedLabel> = labels
        .iter()
        .filter(|l| !unknown.contains(&l.clip_id))
        .cloned()
        .collect();
    let tags = labels_to_tags(&known, index)?;
    Ok(IngestOutcome {
        labels,
        tags,
        unknown_clips: unknown.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use wingbeat_core::crowdsource::CrowdLabel;
    use wingbeat_core::dataset::{RecordingMetadata, TagSource};
    use wingbeat_core::dsp::AudioBuffer;

    #[test]
    fn votes_parse_rfc3339() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"clip_id\":\"r_0\",\"volunteer_id\":\"a\",\"says_mosquito\":true,\"cast_at\":\"2024-01-01T00:00:01.5Z\"}\n",
                "\n",
                "{\"clip_id\":\"r_0\",\"volunteer_id\":\"b\",\"says_mosquito\":false,\"cast_at\":\"2024-01-01T01:00:00+01:00\"}\n",
            ),
        )
        .unwrap();
        let v = read_votes(&path).unwrap();
        assert_eq!(v[0].cast_at_ms, 1_704_067_201_500);
        assert_eq!(v[1].cast_at_ms, 1_704_067_200_000);

        std::fs::write(
            &path,
            "{\"clip_id\":\"r\",\"volunteer_id\":\"a\",\"says_mosquito\":true,\"cast_at\":\"yesterday\"}\n",
        )
        .unwrap();
        assert!(matches!(read_votes(&path), Err(Error::Line { line: 1, .. })));
    }

    #[test]
    fn ingest_skips_unknown_clips() {
        let rec = Recording {
            id: "r".into(),
            audio: AudioBuffer::silence(1600, 8000),
            metadata: RecordingMetadata::default(),
        };
        let index = clip_index(&[rec]);
        assert_eq!(index.keys().collect::<Vec<_>>(), ["r_0", "r_100"]);
        let vote = |clip: &str, who: &str| VolunteerVote {
            clip_id: clip.into(),
            volunteer_id: who.into(),
            says_mosquito: true,
            cast_at_ms: 0,
        };
        let votes: Vec<_> = ["a", "b", "c"]
            .iter()
            .flat_map(|w| [vote("r_100", w), vote("ghost_0", w)])
            .collect();
        let out = ingest(&votes, &index, &AggregationConfig::default()).unwrap();
        assert_eq!(out.unknown_clips, ["ghost_0"]);
        assert!(out.labels.iter().all(|l| l.label == CrowdLabel::Mosquito));
        assert_eq!(out.tags.len(), 1);
        assert_eq!((out.tags[0].start_s, out.tags[0].end_s), (0.1, 0.2));
        assert_eq!(out.tags[0].source, TagSource::Crowd);
    }
}
