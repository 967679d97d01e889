//! Small untrained models with deterministic weights for bundle and service
//! tests.
#![allow(dead_code)]

use xray_core::bundle::{Fixture, ModelBundle};
use xray_core::classifier::Classifier;
use xray_core::models::{
    build_autoencoder, build_classifier, class_names, init_weights, AutoencoderConfig,
    ClassifierConfig,
};
use xray_core::ood::{LatentReference, OodGate, OodMetricKind};
use xray_core::preprocess::PreprocessSpec;
use xray_core::tensor::Model;

pub const INPUT_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 3;

pub fn toy_classifier(seed: u64) -> Classifier {
    let cfg = ClassifierConfig {
        input_size: INPUT_SIZE,
        num_classes: NUM_CLASSES,
        ..ClassifierConfig::default()
    };
    let spec = build_classifier(&cfg).unwrap();
    let model = Model::new(&spec, init_weights(&spec, seed)).unwrap();
    Classifier::new(
        model,
        PreprocessSpec::new(INPUT_SIZE, 0.4, 0.25).unwrap(),
        class_names(NUM_CLASSES),
        vec![0.3, 0.5, 0.7],
    )
    .unwrap()
}

pub fn toy_gate(seed: u64, metric: OodMetricKind, threshold: f64) -> OodGate {
    let cfg = AutoencoderConfig {
        input_size: 16,
        latent_dim: 64,
        channels: vec![4, 4],
    };
    let (enc, dec) = build_autoencoder(&cfg).unwrap();
    OodGate {
        encoder: Model::new(&enc, init_weights(&enc, seed)).unwrap(),
        decoder: Model::new(&dec, init_weights(&dec, seed + 1)).unwrap(),
        preprocess: PreprocessSpec::new(16, 0.0, 1.0).unwrap(),
        metric,
        threshold,
        reference: LatentReference::Prior,
    }
}

pub fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            seed: 101,
            labels: vec![true, false, false],
        },
        Fixture {
            seed: 102,
            labels: vec![false, true, true],
        },
        Fixture {
            seed: 103,
            labels: vec![false, false, false],
        },
    ]
}

/// Classifier plus gate plus three verification fixtures.
pub fn toy_bundle(seed: u64, metric: OodMetricKind, threshold: f64) -> ModelBundle {
    let mut b =
        ModelBundle::new(&toy_classifier(seed)).with_ood(&toy_gate(seed + 10, metric, threshold));
    b.attach_verification(fixtures(), 48).unwrap();
    b
}
