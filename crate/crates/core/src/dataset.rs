//! From recordings and tag segments to labelled 0.1 s samples, balanced
//! datasets, stratified splits and the seeded multi-trial protocol.
//!
//! Trial `t` uses `seed_t = base_seed + t` for balancing, splitting and SVM
//! training, so the whole protocol is a deterministic function of the corpus,
//! the base seed and the configuration.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dsp::{clip_len, AudioBuffer, FeatureVector, CLIP_DURATION_S};
use crate::error::{config_err, Error, Result};
use crate::eval::{self, TrialResult};
use crate::pipeline::{train_two_stage, TwoStageConfig, TwoStageModel};
use crate::rng::{self, Purpose};
use crate::ClassId;

/// Slack for comparing tag boundaries against recording bounds.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordingMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species_prior: Option<ClassId>,
    /// RFC 3339 timestamp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captured_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub audio: AudioBuffer,
    pub metadata: RecordingMetadata,
}

/// A `[start, start + len)` sample range of one recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub recording_id: String,
    pub start_sample: usize,
    pub len: usize,
    pub sample_rate_hz: u32,
}

impl ClipWindow {
    pub fn start_s(&self) -> f64 {
        self.start_sample as f64 / self.sample_rate_hz as f64
    }

    pub fn end_s(&self) -> f64 {
        (self.start_sample + self.len) as f64 / self.sample_rate_hz as f64
    }

    /// Stable identifier `<recording>_<start ms>`.
    pub fn clip_id(&self) -> String {
        format!("{}_{}", self.recording_id, libm::round(self.start_s() * 1000.0) as u64)
    }

    pub fn audio(&self, recording: &AudioBuffer) -> AudioBuffer {
        recording.slice(self.start_sample, self.start_sample + self.len)
    }
}

/// Consecutive non-overlapping clips from t = 0; the trailing remainder is dropped.
pub fn segment_recording(recording: &Recording, clip_duration_s: f64) -> Vec<ClipWindow> {
    let rate = recording.audio.sample_rate_hz();
    let len = if clip_duration_s == CLIP_DURATION_S {
        clip_len(rate)
    } else {
        libm::round(clip_duration_s * rate as f64) as usize
    };
    if len == 0 {
        return Vec::new();
    }
    (0..recording.audio.len() / len)
        .map(|i| ClipWindow {
            recording_id: recording.id.clone(),
            start_sample: i * len,
            len,
            sample_rate_hz: rate,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagSource {
    Expert,
    Crowd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSegment {
    pub recording_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub label: ClassId,
    pub source: TagSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub recording_id: String,
    pub clip_start_s: f64,
    pub clip_start_sample: usize,
    pub class_label: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureVector>,
}

impl LabeledSample {
    /// Identity of the underlying clip.
    pub fn key(&self) -> (&str, usize) {
        (&self.recording_id, self.clip_start_sample)
    }

    pub fn feature(&self) -> Result<&FeatureVector> {
        self.feature.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "sample {}@{} has no cached feature",
                self.recording_id, self.clip_start_s
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscardedClip {
    pub window: ClipWindow,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelingOutcome {
    pub samples: Vec<LabeledSample>,
    pub discarded: Vec<DiscardedClip>,
}

/// Fraction of a clip that must be covered by one label's tags.
pub const MIN_TAG_COVERAGE: f64 = 0.5;

/// Labels clips from tag overlap. `durations` maps recording id to length in
/// seconds and is used to validate the tags.
pub fn label_clips(
    clips: &[ClipWindow],
    tags: &[TagSegment],
    durations: &BTreeMap<String, f64>,
    background: &ClassId,
) -> Result<LabelingOutcome> {
    for t in tags {
        let duration = durations
            .get(&t.recording_id)
            .ok_or_else(|| Error::Validation(format!("tag references unknown recording `{}`", t.recording_id)))?;
        if !(t.start_s >= 0.0 && t.start_s < t.end_s && t.end_s <= duration + TIME_EPS) {
            return Err(Error::Validation(format!(
                "tag [{}, {}] on `{}` is outside [0, {duration}]",
                t.start_s, t.end_s, t.recording_id
            )));
        }
    }
    let mut by_recording: BTreeMap<&str, Vec<&TagSegment>> = BTreeMap::new();
    for t in tags {
        by_recording.entry(&t.recording_id).or_default().push(t);
    }

    let mut out = LabelingOutcome::default();
    for clip in clips {
        let (c0, c1) = (clip.start_s(), clip.end_s());
        let mut coverage: BTreeMap<&ClassId, Vec<(f64, f64)>> = BTreeMap::new();
        for t in by_recording.get(clip.recording_id.as_str()).into_iter().flatten() {
            let (a, b) = (t.start_s.max(c0), t.end_s.min(c1));
            if b > a {
                coverage.entry(&t.label).or_default().push((a, b));
            }
        }
        let width = c1 - c0;
        let overlaps: Vec<(&ClassId, f64)> = coverage
            .into_iter()
            .map(|(label, spans)| (label, union_length(spans) / width))
            .collect();
        let best = overlaps.iter().map(|(_, f)| *f).fold(0.0, f64::max);
        if best + TIME_EPS < MIN_TAG_COVERAGE {
            out.samples.push(sample(clip, background.clone()));
            continue;
        }
        let winners: Vec<&ClassId> = overlaps
            .iter()
            .filter(|(_, f)| (best - f).abs() <= TIME_EPS)
            .map(|(l, _)| *l)
            .collect();
        if winners.len() == 1 {
            out.samples.push(sample(clip, winners[0].clone()));
        } else {
            let names: Vec<&str> = winners.iter().map(|c| c.as_str()).collect();
            out.discarded.push(DiscardedClip {
                window: clip.clone(),
                reason: format!("tied tag coverage {best:.3} between {}", names.join(", ")),
            });
        }
    }
    Ok(out)
}

fn sample(clip: &ClipWindow, class_label: ClassId) -> LabeledSample {
    LabeledSample {
        recording_id: clip.recording_id.clone(),
        clip_start_s: clip.start_s(),
        clip_start_sample: clip.start_sample,
        class_label,
        feature: None,
    }
}

fn union_length(mut spans: Vec<(f64, f64)>) -> f64 {
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for (a, b) in spans {
        current = match current {
            Some((s, e)) if a <= e => Some((s, e.max(b))),
            Some((s, e)) => {
                total += e - s;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((s, e)) = current {
        total += e - s;
    }
    total
}

/// Segments every recording and labels the clips.
pub fn label_recordings(
    recordings: &[Recording],
    tags: &[TagSegment],
    background: &ClassId,
) -> Result<LabelingOutcome> {
    let durations = recordings
        .iter()
        .map(|r| (r.id.clone(), r.audio.duration_s()))
        .collect();
    let clips: Vec<ClipWindow> = recordings
        .iter()
        .flat_map(|r| segment_recording(r, CLIP_DURATION_S))
        .collect();
    label_clips(&clips, tags, &durations, background)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedDataset {
    pub classes: Vec<ClassId>,
    pub samples_per_class: usize,
    /// One list per class, aligned with `classes`.
    pub samples: Vec<Vec<LabeledSample>>,
}

impl BalancedDataset {
    pub fn len(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Background first, then the other labels in order of first appearance.
pub fn class_order(samples: &[LabeledSample], background: &ClassId) -> Vec<ClassId> {
    let mut classes = Vec::new();
    if samples.iter().any(|s| &s.class_label == background) {
        classes.push(background.clone());
    }
    for s in samples {
        if !classes.contains(&s.class_label) {
            classes.push(s.class_label.clone());
        }
    }
    classes
}

/// Seeded uniform downsampling without replacement to `per_class` samples per class.
pub fn build_balanced(
    samples: &[LabeledSample],
    classes: &[ClassId],
    per_class: usize,
    seed: u64,
) -> Result<BalancedDataset> {
    if per_class == 0 {
        return Err(config_err!("per_class must be positive"));
    }
    let mut rng = rng::stream(seed, Purpose::Balance);
    let mut out = Vec::with_capacity(classes.len());
    for class in classes {
        let mut pool: Vec<&LabeledSample> = samples.iter().filter(|s| &s.class_label == class).collect();
        if pool.len() < per_class {
            return Err(Error::InsufficientClass {
                class: String::from(class.as_str()),
                available: pool.len(),
                required: per_class,
            });
        }
        let (chosen, _) = pool.partial_shuffle(&mut rng, per_class);
        out.push(chosen.iter().map(|s| (*s).clone()).collect());
    }
    Ok(BalancedDataset {
        classes: classes.to_vec(),
        samples_per_class: per_class,
        samples: out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSplit {
    pub trial_seed: u64,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Per-class stratified split: `round(per_class * train_fraction)` samples of
/// each class go to training, the rest to test.
pub fn split_random(dataset: &BalancedDataset, train_fraction: f64, seed: u64) -> Result<TrialSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(config_err!("train fraction {train_fraction} not in (0, 1)"));
    }
    let n_train = libm::round(dataset.samples_per_class as f64 * train_fraction) as usize;
    if n_train == 0 || n_train >= dataset.samples_per_class {
        return Err(config_err!(
            "train fraction {train_fraction} of {} samples leaves an empty side",
            dataset.samples_per_class
        ));
    }
    let mut rng = rng::stream(seed, Purpose::Split);
    let mut train = Vec::with_capacity(n_train * dataset.classes.len());
    let mut test = Vec::with_capacity(dataset.len() - train.capacity());
    for class_samples in &dataset.samples {
        let mut idx: Vec<usize> = (0..class_samples.len()).collect();
        idx.shuffle(&mut rng);
        let (a, b) = idx.split_at(n_train);
        train.extend(a.iter().map(|&i| class_samples[i].clone()));
        test.extend(b.iter().map(|&i| class_samples[i].clone()));
    }
    Ok(TrialSplit {
        trial_seed: seed,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub per_class: usize,
    pub train_fraction: f64,
    pub n_permutations: usize,
    pub model: TwoStageConfig,
    /// Class order for balancing and reporting; derived from the samples when `None`.
    pub classes: Option<Vec<ClassId>>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            per_class: 62,
            train_fraction: 0.5,
            n_permutations: 1000,
            model: TwoStageConfig::default(),
            classes: None,
        }
    }
}

impl TrialConfig {
    pub fn classes_for(&self, samples: &[LabeledSample]) -> Vec<ClassId> {
        self.classes
            .clone()
            .unwrap_or_else(|| class_order(samples, &self.model.background))
    }
}

pub fn train_on(samples: &[LabeledSample], config: &TwoStageConfig) -> Result<TwoStageModel> {
    let features: Vec<&[f64]> = samples
        .iter()
        .map(|s| s.feature().map(|f| f.values()))
        .collect::<Result<_>>()?;
    let labels: Vec<ClassId> = samples.iter().map(|s| s.class_label.clone()).collect();
    train_two_stage(&features, &labels, config)
}

/// One trial: balance, split, train and evaluate with `seed = base_seed + trial`.
pub fn run_trial(
    samples: &[LabeledSample],
    classes: &[ClassId],
    trial: usize,
    base_seed: u64,
    config: &TrialConfig,
) -> Result<TrialResult> {
    let seed = base_seed.wrapping_add(trial as u64);
    let wrap = |e: Error| Error::Trial {
        trial,
        source: alloc::boxed::Box::new(e),
    };
    let balanced = build_balanced(samples, classes, config.per_class, seed).map_err(wrap)?;
    let split = split_random(&balanced, config.train_fraction, seed).map_err(wrap)?;
    let model = train_on(&split.train, &config.model.clone().with_seed(seed)).map_err(wrap)?;
    let mut result = eval::evaluate_trial(&model, &split.test, config.n_permutations, seed).map_err(wrap)?;
    result.trial_index = trial;
    Ok(result)
}

/// Runs `n_trials` trials in order. Callers with threads can run [`run_trial`]
/// in parallel; the results are identical.
pub fn run_trials(
    samples: &[LabeledSample],
    n_trials: usize,
    base_seed: u64,
    config: &TrialConfig,
) -> Result<Vec<TrialResult>> {
    let classes = config.classes_for(samples);
    (0..n_trials)
        .map(|t| run_trial(samples, &classes, t, base_seed, config))
        .collect()
}
