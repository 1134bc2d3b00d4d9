//! Model-filtered clip selection for volunteer tagging and aggregation of the
//! returned yes/no votes into training tags.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{segment_recording, ClipWindow, Recording, TagSegment, TagSource};
use crate::dsp::CLIP_DURATION_S;
use crate::error::{config_err, Error, Result};
use crate::pipeline::{ClipClassifier, Detection, TwoStageModel};
use crate::ClassId;

/// Label given to crowd-confirmed clips.
pub const CROWD_MOSQUITO_LABEL: &str = "mosquito";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub recording_id: String,
    pub clip_start_s: f64,
    pub stage1_score: f64,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedClip {
    pub window: ClipWindow,
    pub detection: Detection,
}

/// Every 0.1 s clip of `recording` whose stage-1 score exceeds the model threshold.
pub fn select_positive_clips(model: &TwoStageModel, recording: &Recording) -> Result<Vec<SelectedClip>> {
    let classifier = ClipClassifier::new(model)?;
    let mut out = Vec::new();
    for window in segment_recording(recording, CLIP_DURATION_S) {
        let detection = classifier.classify(&window.audio(&recording.audio))?;
        if detection.stage1_score > model.threshold {
            out.push(SelectedClip { window, detection });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolunteerVote {
    pub clip_id: String,
    pub volunteer_id: String,
    pub says_mosquito: bool,
    /// Milliseconds since the Unix epoch.
    pub cast_at_ms: i64,
}

/// Keeps one vote per (clip, volunteer): the latest, with a yes winning an
/// exact timestamp tie. The result is sorted and independent of input order.
pub fn dedupe_votes(votes: &[VolunteerVote]) -> Vec<VolunteerVote> {
    let mut latest: BTreeMap<(&str, &str), &VolunteerVote> = BTreeMap::new();
    for v in votes {
        let key = (v.clip_id.as_str(), v.volunteer_id.as_str());
        match latest.get(&key) {
            Some(prev) if (prev.cast_at_ms, prev.says_mosquito) >= (v.cast_at_ms, v.says_mosquito) => {}
            _ => {
                latest.insert(key, v);
            }
        }
    }
    latest.into_values().cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub min_votes: usize,
    pub yes_threshold: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            min_votes: 3,
            yes_threshold: 0.5,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_votes == 0 {
            return Err(config_err!("min_votes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.yes_threshold) {
            return Err(config_err!("yes_threshold {} not in [0, 1]", self.yes_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrowdLabel {
    Mosquito,
    Background,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedLabel {
    pub clip_id: String,
    pub label: CrowdLabel,
    /// Fraction of yes votes.
    pub confidence: f64,
    pub n_votes: usize,
}

/// Deduplicates and aggregates votes per clip; output sorted by clip id.
pub fn aggregate_votes(votes: &[VolunteerVote], config: &AggregationConfig) -> Result<Vec<AggregatedLabel>> {
    config.validate()?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for v in dedupe_votes(votes) {
        let t = tally.entry(v.clip_id).or_default();
        t.0 += usize::from(v.says_mosquito);
        t.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(clip_id, (yes, n))| {
            let confidence = yes as f64 / n as f64;
            let label = if n < config.min_votes || confidence == config.yes_threshold {
                CrowdLabel::Undecided
            } else if confidence > config.yes_threshold {
                CrowdLabel::Mosquito
            } else {
                CrowdLabel::Background
            };
            AggregatedLabel {
                clip_id,
                label,
                confidence,
                n_votes: n,
            }
        })
        .collect())
}

/// Where a clip id points in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRef {
    pub recording_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl From<&ClipWindow> for ClipRef {
    fn from(w: &ClipWindow) -> Self {
        Self {
            recording_id: w.recording_id.clone(),
            start_s: w.start_s(),
            end_s: w.end_s(),
        }
    }
}

/// Crowd tags covering each mosquito-labelled clip.
pub fn labels_to_tags(labels: &[AggregatedLabel], index: &BTreeMap<String, ClipRef>) -> Result<Vec<TagSegment>> {
    let mosquito: Vec<&AggregatedLabel> = labels.iter().filter(|l| l.label == CrowdLabel::Mosquito).collect();
    let missing: Vec<&str> = mosquito
        .iter()
        .filter(|l| !index.contains_key(&l.clip_id))
        .map(|l| l.clip_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "unresolvable clip ids: {}",
            missing.join(", ")
        )));
    }
    Ok(mosquito
        .into_iter()
        .map(|l| {
            let r = &index[&l.clip_id];
            TagSegment {
                recording_id: r.recording_id.clone(),
                start_s: r.start_s,
                end_s: r.end_s,
                label: ClassId::from(CROWD_MOSQUITO_LABEL),
                source: TagSource::Crowd,
            }
        })
        .collect())
}
