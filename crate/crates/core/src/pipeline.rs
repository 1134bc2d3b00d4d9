//! Two-stage detector: a binary SVM gates mosquito presence, then a
//! one-vs-one SVM names the species. Both stages share one normaliser.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsp::{AudioBuffer, DspConfig, FeatureExtractor, FeatureVector, CANONICAL_RATE_HZ};
use crate::error::{contract, Error, Result};
use crate::svm::{
    self, auto_gamma, BinarySvmModel, KernelSpec, MulticlassSvmModel, OvoPrediction, Polarity, SvmTrainConfig,
};
use crate::ClassId;

/// Per-dimension standardisation. Zero-variance dimensions keep SD = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<F: AsRef<[f64]>>(features: &[F]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::Training("cannot fit a normaliser on no data".into()))?;
        let dim = first.as_ref().len();
        let n = features.len() as f64;
        let mut mean = alloc::vec![0.0; dim];
        for f in features {
            let f = f.as_ref();
            if f.len() != dim {
                return Err(contract!("feature dimension {} differs from {dim}", f.len()));
            }
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = alloc::vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = libm::sqrt(s / n);
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(contract!(
                "feature has dimension {}, normaliser expects {}",
                x.len(),
                self.mean.len()
            ));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub stage1: SvmTrainConfig,
    pub stage2: SvmTrainConfig,
    /// Stage-1 scores strictly above this open the gate.
    pub threshold: f64,
    pub background: ClassId,
    pub dsp: DspConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            stage1: SvmTrainConfig::default(),
            stage2: SvmTrainConfig::default(),
            threshold: 0.0,
            background: ClassId::background(),
            dsp: DspConfig::default(),
        }
    }
}

impl TwoStageConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageModel {
    pub normalizer: Normalizer,
    pub stage1: BinarySvmModel,
    pub stage2: MulticlassSvmModel,
    pub species_list: Vec<ClassId>,
    pub background: ClassId,
    pub threshold: f64,
    pub dsp_config: DspConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub mosquito_present: bool,
    pub stage1_score: f64,
    pub species: Option<ClassId>,
    /// Votes per species, aligned with `species_list`.
    pub stage2_votes: Option<Vec<u32>>,
}

impl Detection {
    /// Background when the gate is closed, otherwise the species verdict.
    pub fn predicted_class<'a>(&'a self, background: &'a ClassId) -> &'a ClassId {
        self.species.as_ref().unwrap_or(background)
    }
}

/// Fits the normaliser on all samples, trains stage 1 as background vs any
/// species and stage 2 on species samples only. Species order is the order of
/// first appearance in `labels`.
pub fn train_two_stage<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[ClassId],
    config: &TwoStageConfig,
) -> Result<TwoStageModel> {
    if features.len() != labels.len() {
        return Err(contract!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        ));
    }
    if !labels.iter().any(|l| l == &config.background) {
        return Err(Error::Training(format!(
            "training data has no `{}` samples",
            config.background
        )));
    }
    let mut species_list: Vec<ClassId> = Vec::new();
    for l in labels {
        if l != &config.background && !species_list.contains(l) {
            species_list.push(l.clone());
        }
    }
    if species_list.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 species besides `{}`, got {}",
            config.background,
            species_list.len()
        )));
    }

    let normalizer = Normalizer::fit(features)?;
    let normalized: Vec<Vec<f64>> = features
        .iter()
        .map(|f| normalizer.apply(f.as_ref()))
        .collect::<Result<_>>()?;
    let shared_kernel = KernelSpec::Rbf {
        gamma: auto_gamma(&normalized),
    };

    let polarity: Vec<Polarity> = labels
        .iter()
        .map(|l| {
            if l == &config.background {
                Polarity::Negative
            } else {
                Polarity::Positive
            }
        })
        .collect();
    let stage1_cfg = SvmTrainConfig {
        kernel: Some(config.stage1.kernel.unwrap_or(shared_kernel)),
        ..config.stage1.clone()
    };
    let stage1 = svm::train_binary_labeled(
        &normalized,
        &polarity,
        config.background.clone(),
        ClassId::from("mosquito"),
        &stage1_cfg,
    )
    .map_err(|e| stage_error(1, e))?;

    let (species_x, species_y): (Vec<&[f64]>, Vec<ClassId>) = normalized
        .iter()
        .zip(labels)
        .filter(|(_, l)| *l != &config.background)
        .map(|(x, l)| (x.as_slice(), l.clone()))
        .unzip();
    let stage2_cfg = SvmTrainConfig {
        kernel: Some(config.stage2.kernel.unwrap_or(shared_kernel)),
        ..config.stage2.clone()
    };
    let stage2 = svm::train_ovo(&species_x, &species_y, &species_list, &stage2_cfg).map_err(|e| stage_error(2, e))?;

    Ok(TwoStageModel {
        normalizer,
        stage1,
        stage2,
        species_list,
        background: config.background.clone(),
        threshold: config.threshold,
        dsp_config: config.dsp.clone(),
    })
}

fn stage_error(stage: u8, e: Error) -> Error {
    match e {
        Error::Training(msg) => Error::Training(format!("stage {stage}: {msg}")),
        other => other,
    }
}

impl TwoStageModel {
    pub fn dimension(&self) -> usize {
        self.normalizer.dimension()
    }

    /// Every class the detector can emit: background first, then species.
    pub fn classes(&self) -> Vec<ClassId> {
        core::iter::once(self.background.clone())
            .chain(self.species_list.iter().cloned())
            .collect()
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    /// Stage-1 decision value of an already-normalised feature.
    pub fn stage1_score(&self, normalized: &[f64]) -> f64 {
        self.stage1.decision_value_unchecked(normalized)
    }

    /// Stage-2 vote of an already-normalised feature.
    pub fn species_vote(&self, normalized: &[f64]) -> OvoPrediction {
        self.stage2.predict_unchecked(normalized)
    }

    pub fn classify_sample(&self, feature: &FeatureVector) -> Result<Detection> {
        self.classify_values(feature.values())
    }

    pub fn classify_values(&self, feature: &[f64]) -> Result<Detection> {
        let x = self.normalizer.apply(feature)?;
        Ok(self.classify_normalized(&x))
    }

    pub fn classify_normalized(&self, x: &[f64]) -> Detection {
        let score = self.stage1_score(x);
        if score > self.threshold {
            let vote = self.species_vote(x);
            Detection {
                mosquito_present: true,
                stage1_score: score,
                species: Some(vote.class),
                stage2_votes: Some(vote.votes),
            }
        } else {
            Detection {
                mosquito_present: false,
                stage1_score: score,
                species: None,
                stage2_votes: None,
            }
        }
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.dsp_config.clone(), CANONICAL_RATE_HZ)
    }
}

/// Model plus a cached feature extractor at the canonical rate.
#[derive(Debug, Clone)]
pub struct ClipClassifier<'m> {
    model: &'m TwoStageModel,
    extractor: FeatureExtractor,
}

impl<'m> ClipClassifier<'m> {
    pub fn new(model: &'m TwoStageModel) -> Result<Self> {
        Ok(Self {
            extractor: model.extractor()?,
            model,
        })
    }

    pub fn model(&self) -> &'m TwoStageModel {
        self.model
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn features(&self, clip: &AudioBuffer) -> Result<FeatureVector> {
        if clip.sample_rate_hz() == CANONICAL_RATE_HZ {
            self.extractor.extract(clip)
        } else {
            self.extractor.extract(&clip.resample_linear(CANONICAL_RATE_HZ)?)
        }
    }

    pub fn classify(&self, clip: &AudioBuffer) -> Result<Detection> {
        self.model.classify_sample(&self.features(clip)?)
    }

    pub fn classify_batch(&self, clips: &[AudioBuffer]) -> Result<Vec<Detection>> {
        clips.iter().map(|c| self.classify(c)).collect()
    }
}

pub fn classify_clip(model: &TwoStageModel, clip: &AudioBuffer) -> Result<Detection> {
    ClipClassifier::new(model)?.classify(clip)
}

pub fn describe(detection: &Detection) -> String {
    match &detection.species {
        Some(s) => format!("mosquito ({s}) score {:.3}", detection.stage1_score),
        None => format!("no mosquito, score {:.3}", detection.stage1_score),
    }
}
