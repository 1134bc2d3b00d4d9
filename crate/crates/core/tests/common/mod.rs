#![allow(dead_code)]

use wingbeat_core::dataset::{label_recordings, train_on, LabeledSample};
use wingbeat_core::dsp::{DspConfig, FeatureExtractor};
use wingbeat_core::pipeline::{TwoStageConfig, TwoStageModel};
use wingbeat_core::synth::{synth_corpus, SynthConfig, SynthCorpus};
use wingbeat_core::ClassId;

pub fn small_corpus(n_species: usize, seed: u64) -> SynthCorpus {
    synth_corpus(&SynthConfig {
        n_species,
        recordings_per_class: 2,
        recording_duration_s: 1.0,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn featurized(corpus: &SynthCorpus) -> Vec<LabeledSample> {
    let extractor = FeatureExtractor::new(DspConfig::default(), 8000).unwrap();
    let mut samples = label_recordings(&corpus.recordings, &corpus.tags, &ClassId::background())
        .unwrap()
        .samples;
    for s in &mut samples {
        let rec = corpus.recordings.iter().find(|r| r.id == s.recording_id).unwrap();
        let clip = rec
            .audio
            .slice(s.clip_start_sample, s.clip_start_sample + extractor.clip_len());
        s.feature = Some(extractor.extract(&clip).unwrap());
    }
    samples
}

pub fn small_model(n_species: usize, seed: u64) -> TwoStageModel {
    let samples = featurized(&small_corpus(n_species, seed));
    train_on(&samples, &TwoStageConfig::default()).unwrap()
}
