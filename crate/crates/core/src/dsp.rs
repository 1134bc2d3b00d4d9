//! MFCC front end.
//!
//! The chain is: pre-emphasis over the whole clip, framing, windowing,
//! zero-padded power spectrum, mel filterbank, log with a fixed floor,
//! orthonormal DCT-II, then mean and standard deviation of every coefficient
//! across the clip's frames. All functions are pure; [`FeatureExtractor`]
//! caches the window, FFT tables, filterbank and DCT basis for one sample rate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Error, Result};
use crate::fft::Fft;

/// Internal processing rate. Audio at other rates is resampled on ingest.
pub const CANONICAL_RATE_HZ: u32 = 8000;
/// Duration of one labelled sample.
pub const CLIP_DURATION_S: f64 = 0.1;
/// Added to mel energies before the log so silent frames stay finite.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono PCM normalised to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(contract!("sample rate must be positive"));
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(contract!("sample {i} = {v} is not a finite value in [-1, 1]"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a buffer from signed 16-bit PCM.
    pub fn from_pcm16(pcm: &[i16], sample_rate_hz: u32) -> Result<Self> {
        Self::new(pcm.iter().map(|&s| pcm16_to_f64(s)).collect(), sample_rate_hz)
    }

    pub fn silence(len: usize, sample_rate_hz: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate_hz: sample_rate_hz.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Copies samples `start..end` (clamped to the buffer).
    pub fn slice(&self, start: usize, end: usize) -> AudioBuffer {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        AudioBuffer {
            samples: self.samples[start..end].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Linear-interpolation resampling. Returns a clone when the rate already matches.
    pub fn resample_linear(&self, target_hz: u32) -> Result<AudioBuffer> {
        if target_hz == 0 {
            return Err(contract!("target sample rate must be positive"));
        }
        if target_hz == self.sample_rate_hz || self.samples.is_empty() {
            return Ok(AudioBuffer {
                samples: self.samples.clone(),
                sample_rate_hz: target_hz,
            });
        }
        let ratio = self.sample_rate_hz as f64 / target_hz as f64;
        let out_len = ((self.samples.len() as u64 * target_hz as u64) / self.sample_rate_hz as u64) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (libm::floor(pos) as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                (self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac).clamp(-1.0, 1.0)
            })
            .collect();
        Ok(AudioBuffer {
            samples,
            sample_rate_hz: target_hz,
        })
    }

    pub fn to_pcm16(&self) -> Vec<i16> {
        self.samples.iter().map(|&s| f64_to_pcm16(s)).collect()
    }
}

pub fn pcm16_to_f64(s: i16) -> f64 {
    s as f64 / 32768.0
}

pub fn f64_to_pcm16(s: f64) -> i16 {
    libm::round(s.clamp(-1.0, 1.0) * 32768.0).clamp(-32768.0, 32767.0) as i16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        if len == 1 {
            return vec![1.0];
        }
        let denom = (len - 1) as f64;
        (0..len)
            .map(|n| {
                let phase = 2.0 * PI * n as f64 / denom;
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * libm::cos(phase),
                    WindowKind::Hann => 0.5 - 0.5 * libm::cos(phase),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub frame_length_samples: usize,
    pub hop_length_samples: usize,
    pub fft_size: usize,
    pub n_mel_filters: usize,
    pub n_mfcc: usize,
    pub pre_emphasis: f64,
    pub window: WindowKind,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            frame_length_samples: 256,
            hop_length_samples: 128,
            fft_size: 512,
            n_mel_filters: 26,
            n_mfcc: 13,
            pre_emphasis: 0.97,
            window: WindowKind::Hamming,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_length_samples == 0 || self.hop_length_samples == 0 {
            return Err(config_err!("frame and hop lengths must be positive"));
        }
        if self.hop_length_samples > self.frame_length_samples {
            return Err(config_err!(
                "hop {} exceeds frame {}",
                self.hop_length_samples,
                self.frame_length_samples
            ));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.frame_length_samples {
            return Err(config_err!(
                "fft size {} must be a power of two >= frame length {}",
                self.fft_size,
                self.frame_length_samples
            ));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mel_filters {
            return Err(config_err!(
                "need 1 <= n_mfcc ({}) <= n_mel_filters ({})",
                self.n_mfcc,
                self.n_mel_filters
            ));
        }
        if self.n_mel_filters > self.fft_size / 2 + 1 {
            return Err(config_err!(
                "{} mel filters exceed {} spectrum bins",
                self.n_mel_filters,
                self.fft_size / 2 + 1
            ));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(config_err!("pre-emphasis {} not in [0, 1)", self.pre_emphasis));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Length of the aggregated per-clip vector (mean and SD per coefficient).
    pub fn feature_dimension(&self) -> usize {
        2 * self.n_mfcc
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_length_samples {
            0
        } else {
            (n_samples - self.frame_length_samples) / self.hop_length_samples + 1
        }
    }
}

/// Fixed-length MFCC descriptor of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(contract!("feature vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract!("feature vector contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn hz_to_mel(frequency_hz: f64) -> Result<f64> {
    if frequency_hz.is_nan() || frequency_hz < 0.0 {
        return Err(Error::Domain(format!("frequency {frequency_hz} Hz is negative")));
    }
    Ok(2595.0 * libm::log10(1.0 + frequency_hz / 700.0))
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Applies pre-emphasis to the whole buffer, then cuts frames at hop boundaries.
/// Trailing samples that do not fill a frame are dropped; a buffer shorter than
/// one frame yields no frames.
pub fn frame_signal(buffer: &AudioBuffer, config: &DspConfig) -> Vec<Vec<f64>> {
    frame_samples(buffer.samples(), config)
}

fn frame_samples(samples: &[f64], config: &DspConfig) -> Vec<Vec<f64>> {
    let count = config.frame_count(samples.len());
    if count == 0 {
        return Vec::new();
    }
    let emphasized = pre_emphasize(samples, config.pre_emphasis);
    (0..count)
        .map(|f| {
            let start = f * config.hop_length_samples;
            emphasized[start..start + config.frame_length_samples].to_vec()
        })
        .collect()
}

fn pre_emphasize(samples: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        out.push(if i == 0 { x } else { x - alpha * prev });
        prev = x;
    }
    out
}

/// Windowed, zero-padded `|DFT|^2` of one frame, `fft_size/2 + 1` bins.
pub fn power_spectrum(frame: &[f64], config: &DspConfig) -> Result<Vec<f64>> {
    let fft = Fft::new(config.fft_size)?;
    let window = config.window.coefficients(config.frame_length_samples);
    spectrum_with(frame, &window, &fft, config)
}

fn spectrum_with(frame: &[f64], window: &[f64], fft: &Fft, config: &DspConfig) -> Result<Vec<f64>> {
    if frame.len() != config.frame_length_samples {
        return Err(contract!(
            "frame has {} samples, expected {}",
            frame.len(),
            config.frame_length_samples
        ));
    }
    let windowed: Vec<f64> = frame.iter().zip(window).map(|(x, w)| x * w).collect();
    Ok(fft.power(&windowed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    filters: Vec<Vec<f64>>,
    center_frequencies_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn center_frequencies_hz(&self) -> &[f64] {
        &self.center_frequencies_hz
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.filters.first().map_or(0, Vec::len)
    }

    pub fn energies(&self, spectrum: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|row| row.iter().zip(spectrum).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Triangular filters with centres equally spaced in mel between 0 Hz and
/// Nyquist. Edges sit on FFT bins `floor((fft + 1) * f / sr)`, so every row
/// peaks at exactly 1 on its centre bin and reaches 0 at its neighbours' centres.
pub fn build_mel_filterbank(config: &DspConfig, sample_rate_hz: u32) -> Result<MelFilterbank> {
    let n = config.n_mel_filters;
    if n == 0 {
        return Err(config_err!("need at least one mel filter"));
    }
    if sample_rate_hz == 0 {
        return Err(config_err!("sample rate must be positive"));
    }
    let nyquist = sample_rate_hz as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist)?;
    let edges_hz: Vec<f64> = (0..n + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n + 1) as f64))
        .collect();
    let n_bins = config.n_bins();
    let bins: Vec<usize> = edges_hz
        .iter()
        .map(|f| {
            let b = libm::floor((config.fft_size + 1) as f64 * f / sample_rate_hz as f64) as usize;
            b.min(n_bins - 1)
        })
        .collect();
    let mut filters = Vec::with_capacity(n);
    for m in 0..n {
        let (lo, mid, hi) = (bins[m], bins[m + 1], bins[m + 2]);
        if !(lo < mid && mid < hi) {
            return Err(config_err!(
                "mel filter {m} has no distinct bins (edges {lo}, {mid}, {hi}); \
                 {n} filters are too many for fft size {}",
                config.fft_size
            ));
        }
        let mut row = vec![0.0; n_bins];
        for (k, w) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *w = if k <= mid {
                (k - lo) as f64 / (mid - lo) as f64
            } else {
                (hi - k) as f64 / (hi - mid) as f64
            };
        }
        filters.push(row);
    }
    Ok(MelFilterbank {
        filters,
        center_frequencies_hz: edges_hz[1..=n].to_vec(),
    })
}

/// Orthonormal DCT-II basis, `n_out` rows of length `n_in`.
fn dct_basis(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    let scale0 = libm::sqrt(1.0 / n_in as f64);
    let scale = libm::sqrt(2.0 / n_in as f64);
    (0..n_out)
        .map(|k| {
            let s = if k == 0 { scale0 } else { scale };
            (0..n_in)
                .map(|m| s * libm::cos(PI * k as f64 * (2 * m + 1) as f64 / (2 * n_in) as f64))
                .collect()
        })
        .collect()
}

fn log_energies(energies: &[f64]) -> Vec<f64> {
    energies.iter().map(|e| libm::log(e + LOG_FLOOR)).collect()
}

/// Cepstral coefficients of one power spectrum.
pub fn mfcc(spectrum: &[f64], filterbank: &MelFilterbank, config: &DspConfig) -> Result<Vec<f64>> {
    if spectrum.len() != filterbank.n_bins() {
        return Err(contract!(
            "spectrum has {} bins, filterbank expects {}",
            spectrum.len(),
            filterbank.n_bins()
        ));
    }
    let basis = dct_basis(filterbank.n_filters(), config.n_mfcc.min(filterbank.n_filters()));
    Ok(cepstrum(&log_energies(&filterbank.energies(spectrum)), &basis))
}

/// Orthonormal DCT-II of a log mel-energy vector, first `n_mfcc` terms.
pub fn mfcc_from_log_energies(log_mel: &[f64], n_mfcc: usize) -> Vec<f64> {
    cepstrum(log_mel, &dct_basis(log_mel.len(), n_mfcc.min(log_mel.len())))
}

fn cepstrum(log_mel: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    basis
        .iter()
        .map(|row| row.iter().zip(log_mel).map(|(b, x)| b * x).sum())
        .collect()
}

/// Precomputed MFCC pipeline for one configuration and sample rate.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: DspConfig,
    sample_rate_hz: u32,
    window: Vec<f64>,
    fft: Fft,
    filterbank: MelFilterbank,
    dct: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    pub fn new(config: DspConfig, sample_rate_hz: u32) -> Result<Self> {
        config.validate()?;
        let filterbank = build_mel_filterbank(&config, sample_rate_hz)?;
        Ok(Self {
            window: config.window.coefficients(config.frame_length_samples),
            fft: Fft::new(config.fft_size)?,
            dct: dct_basis(config.n_mel_filters, config.n_mfcc),
            filterbank,
            sample_rate_hz,
            config,
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Samples in one 0.1 s clip at this extractor's rate.
    pub fn clip_len(&self) -> usize {
        clip_len(self.sample_rate_hz)
    }

    /// Per-frame power spectra of `samples`.
    pub fn spectra(&self, samples: &[f64]) -> Vec<Vec<f64>> {
        frame_samples(samples, &self.config)
            .iter()
            .map(|f| {
                let windowed: Vec<f64> = f.iter().zip(&self.window).map(|(x, w)| x * w).collect();
                self.fft.power(&windowed)
            })
            .collect()
    }

    /// Per-frame MFCCs of `samples` (any length).
    pub fn frame_mfccs(&self, samples: &[f64]) -> Vec<Vec<f64>> {
        self.spectra(samples)
            .iter()
            .map(|p| cepstrum(&log_energies(&self.filterbank.energies(p)), &self.dct))
            .collect()
    }

    /// Mean and population SD of every coefficient across the clip's frames.
    pub fn extract(&self, clip: &AudioBuffer) -> Result<FeatureVector> {
        if clip.sample_rate_hz() != self.sample_rate_hz {
            return Err(contract!(
                "clip sampled at {} Hz, extractor built for {} Hz",
                clip.sample_rate_hz(),
                self.sample_rate_hz
            ));
        }
        let expected = self.clip_len();
        if clip.len().abs_diff(expected) > 1 {
            return Err(contract!(
                "clip has {} samples; a {CLIP_DURATION_S} s clip at {} Hz has {expected}",
                clip.len(),
                self.sample_rate_hz
            ));
        }
        self.aggregate(clip.samples())
    }

    fn aggregate(&self, samples: &[f64]) -> Result<FeatureVector> {
        let frames = self.frame_mfccs(samples);
        if frames.is_empty() {
            return Err(contract!("clip of {} samples is shorter than one frame", samples.len()));
        }
        let n = frames.len() as f64;
        let dims = self.config.n_mfcc;
        let mut out = vec![0.0; 2 * dims];
        for d in 0..dims {
            let mean = frames.iter().map(|f| f[d]).sum::<f64>() / n;
            let var = frames.iter().map(|f| (f[d] - mean) * (f[d] - mean)).sum::<f64>() / n;
            out[d] = mean;
            out[dims + d] = libm::sqrt(var);
        }
        FeatureVector::new(out)
    }
}

pub fn clip_len(sample_rate_hz: u32) -> usize {
    libm::round(CLIP_DURATION_S * sample_rate_hz as f64) as usize
}

/// One-shot feature extraction at the clip's own sample rate.
pub fn extract_features(clip: &AudioBuffer, config: &DspConfig) -> Result<FeatureVector> {
    FeatureExtractor::new(config.clone(), clip.sample_rate_hz())?.extract(clip)
}

/// 8-bit grayscale raster, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Log-power spectrogram scaled to `[0, 255]` per image. Columns are frames;
/// rows are FFT bins with the highest frequency in row 0.
pub fn spectrogram_image(clip: &AudioBuffer, config: &DspConfig) -> Result<GrayImage> {
    if clip.is_empty() {
        return Err(contract!("spectrogram of an empty clip"));
    }
    config.validate()?;
    let window = config.window.coefficients(config.frame_length_samples);
    let fft = Fft::new(config.fft_size)?;
    let spectra: Vec<Vec<f64>> = frame_signal(clip, config)
        .iter()
        .map(|f| spectrum_with(f, &window, &fft, config))
        .collect::<Result<_>>()?;
    let height = config.n_bins();
    let width = spectra.len();
    let logs: Vec<Vec<f64>> = spectra
        .iter()
        .map(|s| s.iter().map(|p| libm::log(p + LOG_FLOOR)).collect())
        .collect();
    let (lo, hi) = logs
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let mut pixels = vec![0u8; width * height];
    for (col, column) in logs.iter().enumerate() {
        for (bin, &v) in column.iter().enumerate() {
            let level = if range > 0.0 {
                libm::round((v - lo) / range * 255.0) as u8
            } else {
                0
            };
            pixels[(height - 1 - bin) * width + col] = level;
        }
    }
    Ok(GrayImage { width, height, pixels })
}

/// Log energy of the clip's mean power spectrum in `n_bands` equal-width bands.
pub fn band_energies(extractor: &FeatureExtractor, samples: &[f64], n_bands: usize) -> Vec<f64> {
    let spectra = extractor.spectra(samples);
    let n_bins = extractor.config.n_bins();
    let mut mean = vec![0.0; n_bins];
    for s in &spectra {
        for (m, p) in mean.iter_mut().zip(s) {
            *m += p;
        }
    }
    let frames = spectra.len().max(1) as f64;
    (0..n_bands)
        .map(|b| {
            let lo = b * n_bins / n_bands;
            let hi = ((b + 1) * n_bins / n_bands).max(lo + 1).min(n_bins);
            let e: f64 = mean[lo..hi].iter().sum::<f64>() / frames;
            libm::log(e + LOG_FLOOR)
        })
        .collect()
}
