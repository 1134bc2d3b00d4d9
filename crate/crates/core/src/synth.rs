//! Synthetic corpus: harmonic tone complexes standing in for species
//! wingbeat sounds, plus noise-only background recordings.
//!
//! Species `i` of `n` has fundamental `f0_min + i * (f0_max - f0_min) / (n - 1)`.
//! Each recording draws a small fundamental offset and a slow vibrato, sums
//! harmonics below 95% of Nyquist with amplitude `1/h` and random phases, adds
//! white Gaussian noise at the configured SNR and is peak-normalized.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Recording, RecordingMetadata, TagSegment, TagSource};
use crate::dsp::AudioBuffer;
use crate::error::{config_err, Result};
use crate::rng::{self, Purpose};
use crate::ClassId;

const MAX_HARMONICS: usize = 10;
const PEAK: f64 = 0.9;
const VIBRATO_DEPTH: f64 = 0.005;
const VIBRATO_HZ: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_species: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Relative half-width of the per-recording fundamental offset.
    pub jitter: f64,
    pub snr_db: f64,
    pub recordings_per_class: usize,
    pub recording_duration_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_species: 7,
            f0_min_hz: 200.0,
            f0_max_hz: 700.0,
            jitter: 0.02,
            snr_db: 10.0,
            recordings_per_class: 7,
            recording_duration_s: 2.0,
            sample_rate_hz: 8000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=26).contains(&self.n_species) {
            return Err(config_err!("n_species must be in 1..=26, got {}", self.n_species));
        }
        if !(self.f0_min_hz > 0.0 && self.f0_min_hz <= self.f0_max_hz) {
            return Err(config_err!("need 0 < f0_min <= f0_max"));
        }
        if self.f0_max_hz * (1.0 + self.jitter) >= self.sample_rate_hz as f64 / 2.0 {
            return Err(config_err!("fundamentals must stay below Nyquist"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(config_err!("jitter must be in [0, 0.5)"));
        }
        if !self.snr_db.is_finite() {
            return Err(config_err!("snr_db must be finite"));
        }
        if self.recording_duration_s.is_nan() || self.recording_duration_s <= 0.0 || self.sample_rate_hz == 0 {
            return Err(config_err!("duration and sample rate must be positive"));
        }
        Ok(())
    }

    pub fn species(&self) -> Vec<ClassId> {
        (0..self.n_species)
            .map(|i| ClassId::new(format!("species_{}", (b'a' + i as u8) as char)))
            .collect()
    }

    pub fn fundamental_hz(&self, species: usize) -> f64 {
        if self.n_species == 1 {
            return self.f0_min_hz;
        }
        self.f0_min_hz + species as f64 * (self.f0_max_hz - self.f0_min_hz) / (self.n_species - 1) as f64
    }

    fn n_samples(&self) -> usize {
        libm::round(self.recording_duration_s * self.sample_rate_hz as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub recordings: Vec<Recording>,
    /// Expert tags covering each species recording end to end.
    pub tags: Vec<TagSegment>,
    pub species: Vec<ClassId>,
}

/// Harmonic complex for `species` with noise, `n` samples long.
pub fn species_signal(config: &SynthConfig, species: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = config.sample_rate_hz as f64;
    let f0 = config.fundamental_hz(species) * (1.0 + rng.random_range(-config.jitter..=config.jitter));
    let nyquist = rate / 2.0;
    let harmonics = (1..=MAX_HARMONICS)
        .filter(|&h| h as f64 * f0 * (1.0 + VIBRATO_DEPTH) < 0.95 * nyquist)
        .map(|h| (h, rng.random_range(0.0..2.0 * PI)))
        .collect::<Vec<_>>();
    let vibrato_phase = rng.random_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    let mut clean = vec![0.0; n];
    for (i, out) in clean.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let f = f0 * (1.0 + VIBRATO_DEPTH * libm::sin(2.0 * PI * VIBRATO_HZ * t + vibrato_phase));
        *out = harmonics
            .iter()
            .map(|&(h, p)| libm::sin(h as f64 * phase + p) / h as f64)
            .sum();
        phase += 2.0 * PI * f / rate;
    }
    let power = clean.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64;
    let noise_sd = libm::sqrt(power / libm::pow(10.0, config.snr_db / 10.0));
    for x in clean.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += noise_sd * z;
    }
    peak_normalize(clean)
}

/// White Gaussian noise, `n` samples long.
pub fn background_signal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    peak_normalize((0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn peak_normalize(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    x
}

/// `recordings_per_class` recordings for each species and for background.
pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, Purpose::Synthesis);
    let species = config.species();
    let n = config.n_samples();
    let duration = n as f64 / config.sample_rate_hz as f64;
    let mut recordings = Vec::new();
    let mut tags = Vec::new();
    for r in 0..config.recordings_per_class {
        let id = format!("{}_{r:02}", ClassId::background());
        recordings.push(Recording {
            id,
            audio: AudioBuffer::new(background_signal(n, &mut rng), config.sample_rate_hz)?,
            metadata: RecordingMetadata::default(),
        });
    }
    for (s, class) in species.iter().enumerate() {
        for r in 0..config.recordings_per_class {
            let id = format!("{class}_{r:02}");
            let audio = AudioBuffer::new(species_signal(config, s, n, &mut rng), config.sample_rate_hz)?;
            tags.push(TagSegment {
                recording_id: id.clone(),
                start_s: 0.0,
                end_s: duration,
                label: class.clone(),
                source: TagSource::Expert,
            });
            recordings.push(Recording {
                id,
                audio,
                metadata: RecordingMetadata {
                    species_prior: Some(class.clone()),
                    ..RecordingMetadata::default()
                },
            });
        }
    }
    Ok(SynthCorpus {
        recordings,
        tags,
        species,
    })
}

/// Background noise with a species call over `[call_start_s, call_end_s)`.
pub fn mixed_recording(
    config: &SynthConfig,
    species: usize,
    call_start_s: f64,
    call_end_s: f64,
    seed: u64,
) -> Result<AudioBuffer> {
    config.validate()?;
    let mut rng = rng::stream(seed, Purpose::Synthesis);
    let n = config.n_samples();
    let rate = config.sample_rate_hz as f64;
    let mut samples = background_signal(n, &mut rng);
    let a = (libm::round(call_start_s * rate) as usize).min(n);
    let b = (libm::round(call_end_s * rate) as usize).clamp(a, n);
    let call = species_signal(config, species, b - a, &mut rng);
    samples[a..b].copy_from_slice(&call);
    AudioBuffer::new(samples, config.sample_rate_hz)
}
