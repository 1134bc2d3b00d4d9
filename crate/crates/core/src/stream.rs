//! Live detection over a PCM stream.
//!
//! A [`StreamSession`] accepts audio into a bounded [`RingBuffer`], classifies
//! every complete window at hop boundaries exactly once, smooths the raw
//! stage-1 decisions with a majority vote over the last `smoothing_k` windows
//! and queues [`DetectionEvent`]s for polling. [`batch_equivalent`] computes
//! the same events from a whole buffer without the ring and serves as the
//! oracle for the streaming path. [`gate_recording`] turns events into the
//! audio segments kept by record-on-detection.

use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsp::{band_energies, pcm16_to_f64, AudioBuffer, FeatureExtractor, CANONICAL_RATE_HZ};
use crate::error::{config_err, contract, Error, Result};
use crate::pipeline::{ClipClassifier, TwoStageModel};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    RecordOnly,
    #[default]
    RecordAndDetect,
    RecordOnDetection,
}

impl StreamMode {
    pub fn detects(self) -> bool {
        self != StreamMode::RecordOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub sample_rate_hz: u32,
    pub window_s: f64,
    pub hop_s: f64,
    /// Odd number of raw decisions in the majority vote.
    pub smoothing_k: usize,
    pub pre_roll_s: f64,
    pub post_roll_s: f64,
    pub ring_capacity_s: f64,
    pub mode: StreamMode,
    /// Number of log-energy bands attached to each event, if any.
    pub bands: Option<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: CANONICAL_RATE_HZ,
            window_s: 0.1,
            hop_s: 0.05,
            smoothing_k: 3,
            pre_roll_s: 1.0,
            post_roll_s: 2.0,
            ring_capacity_s: 10.0,
            mode: StreamMode::RecordAndDetect,
            bands: None,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(config_err!("sample rate must be positive"));
        }
        if !(self.window_s > 0.0 && self.hop_s > 0.0 && self.hop_s <= self.window_s) {
            return Err(config_err!(
                "need 0 < hop_s <= window_s, got hop {} window {}",
                self.hop_s,
                self.window_s
            ));
        }
        if self.smoothing_k == 0 || self.smoothing_k.is_multiple_of(2) {
            return Err(config_err!(
                "smoothing_k must be a positive odd integer, got {}",
                self.smoothing_k
            ));
        }
        if !(self.pre_roll_s >= 0.0 && self.post_roll_s >= 0.0) {
            return Err(config_err!("pre/post roll must be non-negative"));
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(config_err!("window and hop must span at least one sample"));
        }
        if self.ring_capacity_samples() < self.window_samples() {
            return Err(config_err!("ring capacity is smaller than one window"));
        }
        if self.bands == Some(0) {
            return Err(config_err!("bands must be positive when set"));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        libm::round(self.window_s * self.sample_rate_hz as f64) as usize
    }

    pub fn hop_samples(&self) -> usize {
        libm::round(self.hop_s * self.sample_rate_hz as f64) as usize
    }

    pub fn ring_capacity_samples(&self) -> usize {
        libm::round(self.ring_capacity_s * self.sample_rate_hz as f64) as usize
    }

    /// Start time of window `index`.
    pub fn window_start_s(&self, index: u64) -> f64 {
        (index * self.hop_samples() as u64) as f64 / self.sample_rate_hz as f64
    }

    /// Number of complete windows in `n_samples`.
    pub fn window_count(&self, n_samples: usize) -> usize {
        let (w, h) = (self.window_samples(), self.hop_samples());
        if n_samples < w {
            0
        } else {
            (n_samples - w) / h + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub window_index: u64,
    pub window_start_s: f64,
    pub stage1_score: f64,
    /// Smoothed decision.
    pub mosquito_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species_votes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<Vec<f64>>,
}

/// Fixed-capacity FIFO of samples addressed by absolute stream position.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    data: Vec<f64>,
    head: usize,
    len: usize,
    /// Absolute index of the oldest stored sample.
    start: u64,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            data: vec![0.0; capacity],
            head: 0,
            len: 0,
            start: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn free(&self) -> usize {
        self.capacity() - self.len
    }

    /// Absolute index one past the newest sample.
    pub fn end(&self) -> u64 {
        self.start + self.len as u64
    }

    /// Appends all of `samples` or, if they do not fit, none of them.
    pub fn push(&mut self, samples: &[f64]) -> Result<()> {
        if samples.len() > self.free() {
            return Err(Error::Overflow { dropped: samples.len() });
        }
        let cap = self.capacity();
        let mut pos = (self.head + self.len) % cap;
        for &s in samples {
            self.data[pos] = s;
            pos += 1;
            if pos == cap {
                pos = 0;
            }
        }
        self.len += samples.len();
        Ok(())
    }

    /// Copies the absolute range `[from, from + out.len())` into `out`.
    pub fn read(&self, from: u64, out: &mut [f64]) -> Result<()> {
        if from < self.start || from + out.len() as u64 > self.end() {
            return Err(contract!(
                "range {from}+{} not buffered ({}..{})",
                out.len(),
                self.start,
                self.end()
            ));
        }
        let cap = self.capacity();
        let mut pos = (self.head + (from - self.start) as usize) % cap;
        for o in out.iter_mut() {
            *o = self.data[pos];
            pos += 1;
            if pos == cap {
                pos = 0;
            }
        }
        Ok(())
    }

    /// Empties the buffer; the next pushed sample gets absolute index `position`.
    pub fn reset_at(&mut self, position: u64) {
        self.head = 0;
        self.len = 0;
        self.start = position;
    }

    /// Drops every sample before absolute index `until`.
    pub fn discard_before(&mut self, until: u64) {
        let n = until.saturating_sub(self.start).min(self.len as u64) as usize;
        self.head = (self.head + n) % self.capacity();
        self.len -= n;
        self.start += n as u64;
    }
}

/// Scores windows for one model.
#[derive(Debug, Clone)]
struct WindowScorer {
    model: Arc<TwoStageModel>,
    extractor: FeatureExtractor,
    rate: u32,
    bands: Option<usize>,
}

struct Scored {
    score: f64,
    normalized: Vec<f64>,
    bands: Option<Vec<f64>>,
}

impl WindowScorer {
    fn new(model: Arc<TwoStageModel>, config: &StreamConfig) -> Result<Self> {
        Ok(Self {
            extractor: model.extractor()?,
            model,
            rate: config.sample_rate_hz,
            bands: config.bands,
        })
    }

    fn score(&self, window: &[f64]) -> Result<Scored> {
        let mut clip = AudioBuffer::new(window.to_vec(), self.rate)?;
        if self.rate != CANONICAL_RATE_HZ {
            clip = clip.resample_linear(CANONICAL_RATE_HZ)?;
        }
        let feature = self.extractor.extract(&clip)?;
        let normalized = self.model.normalizer.apply(feature.values())?;
        Ok(Scored {
            score: self.model.stage1_score(&normalized),
            bands: self.bands.map(|n| band_energies(&self.extractor, clip.samples(), n)),
            normalized,
        })
    }

    fn event(&self, index: u64, config: &StreamConfig, scored: Scored, smoothed: bool) -> DetectionEvent {
        let (species, species_votes) = if smoothed {
            let vote = self.model.species_vote(&scored.normalized);
            (Some(vote.class), Some(vote.votes))
        } else {
            (None, None)
        };
        DetectionEvent {
            window_index: index,
            window_start_s: config.window_start_s(index),
            stage1_score: scored.score,
            mosquito_present: smoothed,
            species,
            species_votes,
            bands: scored.bands,
        }
    }
}

/// Majority over the last `k` raw decisions (fewer at the start); an even split is negative.
#[derive(Debug, Clone)]
struct Smoother {
    k: usize,
    recent: VecDeque<bool>,
}

impl Smoother {
    fn new(k: usize) -> Self {
        Self {
            k,
            recent: VecDeque::with_capacity(k),
        }
    }

    fn push(&mut self, raw: bool) -> bool {
        if self.recent.len() == self.k {
            self.recent.pop_front();
        }
        self.recent.push_back(raw);
        let positives = self.recent.iter().filter(|&&r| r).count();
        2 * positives > self.recent.len()
    }
}

/// One live detection session: a single producer calls [`enqueue`](Self::enqueue)
/// and a single consumer calls [`process_pending`](Self::process_pending);
/// [`push_audio`](Self::push_audio) does both.
#[derive(Debug, Clone)]
pub struct StreamSession {
    config: StreamConfig,
    scorer: WindowScorer,
    ring: RingBuffer,
    smoother: Smoother,
    next_window: u64,
    received: u64,
    events: VecDeque<DetectionEvent>,
    scratch: Vec<f64>,
    closed: bool,
}

impl StreamSession {
    pub fn new(model: Arc<TwoStageModel>, config: StreamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            scorer: WindowScorer::new(model, &config)?,
            ring: RingBuffer::new(config.ring_capacity_samples()),
            smoother: Smoother::new(config.smoothing_k),
            scratch: vec![0.0; config.window_samples()],
            config,
            next_window: 0,
            received: 0,
            events: VecDeque::new(),
            closed: false,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn model(&self) -> &Arc<TwoStageModel> {
        &self.scorer.model
    }

    pub fn samples_received(&self) -> u64 {
        self.received
    }

    pub fn duration_s(&self) -> f64 {
        self.received as f64 / self.config.sample_rate_hz as f64
    }

    pub fn buffered(&self) -> usize {
        self.ring.len()
    }

    /// Fraction of the ring currently occupied.
    pub fn fill_ratio(&self) -> f64 {
        self.ring.len() as f64 / self.ring.capacity() as f64
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn check_open(&self) -> Result<()> {
        if self.closed {
            Err(Error::SessionClosed)
        } else {
            Ok(())
        }
    }

    /// Producer side: stores `samples` without classifying. Fails with
    /// [`Error::Overflow`] and stores nothing when they do not fit.
    pub fn enqueue(&mut self, samples: &[f64]) -> Result<()> {
        self.check_open()?;
        if let Some(bad) = samples.iter().find(|s| !(s.is_finite() && s.abs() <= 1.0)) {
            return Err(contract!("sample {bad} outside [-1, 1]"));
        }
        if !self.config.mode.detects() {
            self.received += samples.len() as u64;
            return Ok(());
        }
        self.ring.push(samples)?;
        self.received += samples.len() as u64;
        Ok(())
    }

    /// Switches mode mid-stream. Turning detection on starts afresh at the
    /// first hop boundary not yet received, with empty smoothing history;
    /// turning it off drops buffered audio. Queued events are kept.
    pub fn set_mode(&mut self, mode: StreamMode) -> Result<()> {
        self.check_open()?;
        let was = self.config.mode.detects();
        self.config.mode = mode;
        if was != mode.detects() {
            let h = self.config.hop_samples() as u64;
            self.ring.reset_at(self.received);
            self.smoother = Smoother::new(self.config.smoothing_k);
            self.next_window = self.received.div_ceil(h);
        }
        Ok(())
    }

    /// Consumer side: classifies every complete pending window and returns how many.
    pub fn process_pending(&mut self) -> Result<usize> {
        self.check_open()?;
        if !self.config.mode.detects() {
            return Ok(0);
        }
        let (w, h) = (self.config.window_samples() as u64, self.config.hop_samples() as u64);
        let mut done = 0;
        while self.next_window * h + w <= self.ring.end() {
            let start = self.next_window * h;
            self.ring.read(start, &mut self.scratch)?;
            let scored = self.scorer.score(&self.scratch)?;
            let raw = scored.score > self.scorer.model.threshold;
            let smoothed = self.smoother.push(raw);
            let event = self.scorer.event(self.next_window, &self.config, scored, smoothed);
            self.events.push_back(event);
            self.next_window += 1;
            self.ring.discard_before(self.next_window * h);
            done += 1;
        }
        Ok(done)
    }

    /// Appends a chunk and classifies every window it completes. Chunks larger
    /// than the ring are fed through in pieces, so this never overflows.
    pub fn push_audio(&mut self, chunk: &AudioBuffer) -> Result<usize> {
        self.check_open()?;
        if chunk.sample_rate_hz() != self.config.sample_rate_hz {
            return Err(contract!(
                "chunk rate {} Hz, session rate {} Hz",
                chunk.sample_rate_hz(),
                self.config.sample_rate_hz
            ));
        }
        self.push_samples(chunk.samples())
    }

    /// [`push_audio`](Self::push_audio) for PCM16 samples at the session rate.
    pub fn push_pcm16(&mut self, pcm: &[i16]) -> Result<usize> {
        let samples: Vec<f64> = pcm.iter().map(|&s| pcm16_to_f64(s)).collect();
        self.push_samples(&samples)
    }

    fn push_samples(&mut self, mut samples: &[f64]) -> Result<usize> {
        self.check_open()?;
        let mut done = 0;
        loop {
            let room = if self.config.mode.detects() {
                self.ring.free()
            } else {
                samples.len()
            };
            let (now, rest) = samples.split_at(room.min(samples.len()));
            self.enqueue(now)?;
            done += self.process_pending()?;
            if rest.is_empty() {
                return Ok(done);
            }
            samples = rest;
        }
    }

    /// Drains the events completed since the last poll.
    pub fn poll_detections(&mut self) -> Result<Vec<DetectionEvent>> {
        self.check_open()?;
        Ok(self.events.drain(..).collect())
    }

    /// Closes the session and returns any events not yet polled.
    pub fn close(&mut self) -> Result<Vec<DetectionEvent>> {
        self.check_open()?;
        let rest = self.events.drain(..).collect();
        self.closed = true;
        Ok(rest)
    }
}

/// Events for a whole buffer, computed window by window without a ring buffer.
pub fn batch_equivalent(
    model: &TwoStageModel,
    buffer: &AudioBuffer,
    config: &StreamConfig,
) -> Result<Vec<DetectionEvent>> {
    config.validate()?;
    if buffer.sample_rate_hz() != config.sample_rate_hz {
        return Err(contract!(
            "buffer rate {} Hz, config rate {} Hz",
            buffer.sample_rate_hz(),
            config.sample_rate_hz
        ));
    }
    if !config.mode.detects() {
        return Ok(Vec::new());
    }
    let classifier = ClipClassifier::new(model)?;
    let (w, h) = (config.window_samples(), config.hop_samples());
    let n = config.window_count(buffer.len());
    let mut raw = Vec::with_capacity(n);
    let mut normalized = Vec::with_capacity(n);
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let clip = buffer.slice(i * h, i * h + w);
        let x = model.normalizer.apply(classifier.features(&clip)?.values())?;
        raw.push(model.stage1_score(&x));
        normalized.push(x);
        clips.push(clip);
    }
    let k = config.smoothing_k;
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let lo = (i + 1).saturating_sub(k);
        let span = &raw[lo..=i];
        let positives = span.iter().filter(|&&s| s > model.threshold).count();
        let present = positives * 2 > span.len();
        let vote = present.then(|| model.species_vote(&normalized[i]));
        let bands = config.bands.map(|nb| {
            let canonical = if clips[i].sample_rate_hz() == CANONICAL_RATE_HZ {
                clips[i].clone()
            } else {
                clips[i].resample_linear(CANONICAL_RATE_HZ).expect("validated rate")
            };
            band_energies(classifier.extractor(), canonical.samples(), nb)
        });
        events.push(DetectionEvent {
            window_index: i as u64,
            window_start_s: config.window_start_s(i as u64),
            stage1_score: raw[i],
            mosquito_present: present,
            species: vote.as_ref().map(|v| v.class.clone()),
            species_votes: vote.map(|v| v.votes),
            bands,
        });
    }
    Ok(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Segments kept by record-on-detection: each run of consecutive positive
/// windows `[t0, t1]` keeps `[t0 - pre_roll, t1 + window + post_roll]`,
/// clamped to `[0, duration_s]`, with overlapping segments merged.
pub fn gate_recording(events: &[DetectionEvent], duration_s: f64, config: &StreamConfig) -> Vec<Segment> {
    let mut runs: Vec<(f64, f64)> = Vec::new();
    let mut last_index: Option<u64> = None;
    for e in events.iter().filter(|e| e.mosquito_present) {
        match (runs.last_mut(), last_index) {
            (Some(run), Some(prev)) if e.window_index == prev + 1 => run.1 = e.window_start_s,
            _ => runs.push((e.window_start_s, e.window_start_s)),
        }
        last_index = Some(e.window_index);
    }
    let mut out: Vec<Segment> = Vec::new();
    for (t0, t1) in runs {
        let seg = Segment {
            start_s: (t0 - config.pre_roll_s).max(0.0),
            end_s: (t1 + config.window_s + config.post_roll_s).min(duration_s),
        };
        match out.last_mut() {
            Some(prev) if seg.start_s <= prev.end_s => prev.end_s = prev.end_s.max(seg.end_s),
            _ => out.push(seg),
        }
    }
    out
}

/// What a session in `config.mode` keeps of a stream of `duration_s` seconds.
pub fn persisted_segments(events: &[DetectionEvent], duration_s: f64, config: &StreamConfig) -> Vec<Segment> {
    match config.mode {
        StreamMode::RecordOnDetection => gate_recording(events, duration_s, config),
        StreamMode::RecordOnly | StreamMode::RecordAndDetect if duration_s > 0.0 => vec![Segment {
            start_s: 0.0,
            end_s: duration_s,
        }],
        _ => Vec::new(),
    }
}
