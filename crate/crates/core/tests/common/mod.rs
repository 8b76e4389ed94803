//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use scanpath::corpus::{Corpus, Scanpath, Sentence, SynthSpec};
use scanpath::model::ModelConfig;
use scanpath::train::{Precision, TrainConfig};
use serde_json::json;

pub fn vocab12() -> Vec<String> {
    (0..12).map(|i| format!("t{i:02}")).collect()
}

/// Forward reading with skips over short words, refixations and EOS after the last word.
pub fn planted_spec() -> SynthSpec {
    serde_json::from_value(json!({
        "vocab": vocab12(),
        "classes": {"short": ["t00", "t01", "t02", "t03"]},
        "sentence_len": [5, 10],
        "policies": [{
            "name": "skipper",
            "start": {"+1": 1.0},
            "rules": [
                {"at": 1, "class": "$end", "dist": {"eos": 1.0}},
                {"at": 1, "class": "short", "first_pass": true, "dist": {"+2": 0.8, "+1": 0.2}}
            ],
            "default": {"+1": 0.85, "0": 0.15}
        }]
    }))
    .expect("valid policy")
}

/// A second policy on the same vocabulary: no skipping, frequent short regressions.
pub fn policy_b_spec() -> SynthSpec {
    serde_json::from_value(json!({
        "vocab": vocab12(),
        "classes": {"short": ["t00", "t01", "t02", "t03"]},
        "sentence_len": [5, 10],
        "policies": [{
            "name": "regressor",
            "start": {"+1": 0.5, "+2": 0.5},
            "rules": [
                {"at": 1, "class": "$end", "dist": {"eos": 0.7, "-1": 0.3}},
                {"at": 0, "class": "short", "first_pass": true, "dist": {"-1": 0.7, "+1": 0.3}}
            ],
            "default": {"+1": 0.7, "+2": 0.3}
        }]
    }))
    .expect("valid policy")
}

/// Regressions of two words triggered by a marker token one word ahead of the first-pass reader.
pub fn regression_spec() -> SynthSpec {
    serde_json::from_value(json!({
        "vocab": vocab12(),
        "vocab_weights": [3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        "classes": {"marker": ["t00"]},
        "sentence_len": [5, 10],
        "policies": [{
            "name": "marker-regressions",
            "start": {"+1": 1.0},
            "rules": [
                {"at": 1, "class": "$end", "dist": {"eos": 1.0}},
                {"at": 1, "class": "marker", "first_pass": true, "dist": {"-2": 0.9, "+1": 0.1}}
            ],
            "default": {"+1": 0.9, "+2": 0.1}
        }]
    }))
    .expect("valid policy")
}

/// Two reader populations: even readers mostly step, odd readers mostly skip.
pub fn two_population_spec() -> SynthSpec {
    serde_json::from_value(json!({
        "vocab": vocab12(),
        "sentence_len": [5, 10],
        "policies": [
            {
                "name": "steppers",
                "start": {"+1": 0.9, "+2": 0.1},
                "rules": [{"at": 1, "class": "$end", "dist": {"eos": 1.0}}],
                "default": {"+1": 0.8, "+2": 0.2}
            },
            {
                "name": "skippers",
                "start": {"+1": 0.1, "+2": 0.9},
                "rules": [{"at": 1, "class": "$end", "dist": {"eos": 1.0}}],
                "default": {"+1": 0.2, "+2": 0.8}
            }
        ]
    }))
    .expect("valid policy")
}

/// A desk-scale model: every component present, small widths.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        bilstm_layers: 2,
        bilstm_units: 32,
        lstm_layers: 2,
        lstm_units: 64,
        dense_units: vec![64, 32, 32, 32],
        dropout_embed: 0.1,
        dropout_recurrent: 0.1,
        dropout_dense: 0.1,
        ..ModelConfig::default()
    }
}

pub fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        max_epochs: 60,
        patience: 6,
        batch_size: 32,
        validation_fraction: 0.1,
        seed,
        precision: Precision::F32,
        eval_batch_size: 128,
    }
}

/// Tiny configuration for exact checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        bilstm_layers: 2,
        bilstm_units: 3,
        lstm_layers: 2,
        lstm_units: 4,
        dense_units: vec![8, 8, 8, 8],
        ..ModelConfig::default()
    }
}

/// Three short sentences with hand-written scanpaths and varied durations.
pub fn toy_corpus() -> Corpus {
    let sent = |id: &str, words: &str| {
        Sentence::new(id, words.split(' ').map(String::from).collect()).unwrap()
    };
    let sentences = vec![
        sent("s1", "the cat sat on the mat"),
        sent("s2", "a dog ran"),
        sent("s3", "birds sing at dawn today"),
    ];
    let path = |r: &str, s: &str, idx: &[usize], k: f64| {
        let mut sp = Scanpath::from_indices(r, s, idx);
        for (j, f) in sp.fixations.iter_mut().enumerate() {
            f.duration = 120.0 + 37.0 * ((j as f64 + k) % 5.0);
            f.landing_pos = ((j as f64 * 0.31 + k * 0.17) % 1.0).abs();
        }
        sp
    };
    let scanpaths = vec![
        path("ann", "s1", &[1, 2, 3, 5, 4, 6], 0.0),
        path("ann", "s2", &[1, 3], 1.0),
        path("ann", "s3", &[2, 3, 4, 5, 5], 2.0),
        path("bob", "s1", &[1, 3, 4, 6], 3.0),
        path("bob", "s2", &[1, 2, 3, 2], 4.0),
        path("bob", "s3", &[1, 2, 4, 3, 5], 5.0),
        path("cy", "s1", &[2, 4, 6, 5], 6.0),
        path("cy", "s3", &[1], 7.0),
    ];
    Corpus::new(sentences, scanpaths).unwrap()
}
