//! Shared desk-scale configuration for the runnable examples.

#![allow(dead_code)]

use qa_adapt::adapt::{AdaptConfig, AdaptSetting};
use qa_adapt::scorer::ScorerTrainConfig;
use qa_adapt::synth::{ShiftSpec, SyntheticBiasSpec};

/// A biased synthetic pair: the target's question and answer features are
/// rotated and translated relative to the source, and its question-type
/// mix differs.
pub fn benchmark_spec(seed: u64) -> SyntheticBiasSpec {
    SyntheticBiasSpec {
        source_name: "synth-source".into(),
        target_name: "synth-target".into(),
        n_train: 4000,
        n_val: 1000,
        n_test: 1000,
        text_dim: 16,
        image_dim: 16,
        decoys: 6,
        concept_count: 24,
        question_shift: Some(ShiftSpec::Random {
            angle: 0.5,
            scale: 1.0,
            offset_norm: 1.3,
        }),
        answer_shift: Some(ShiftSpec::Random {
            angle: 0.5,
            scale: 1.0,
            offset_norm: 1.3,
        }),
        question_squash: None,
        answer_squash: None,
        type_distribution: [0.3, 0.2, 0.15, 0.1, 0.1, 0.1, 0.05],
        target_type_distribution: Some([0.2, 0.15, 0.1, 0.25, 0.1, 0.15, 0.05]),
        phrasing_noise: 0.14,
        seed,
    }
}

/// Desk-scale scorer training: small hidden layer, a dozen epochs.
pub fn scorer_cfg(seed: u64) -> ScorerTrainConfig {
    ScorerTrainConfig {
        epochs: 12,
        batch_size: 100,
        lr: 3e-3,
        hidden_dim: 64,
        seed,
    }
}

/// Desk-scale adaptation: the full-scale loop structure with shrunken
/// widths and counts.
pub fn adapt_cfg(setting: AdaptSetting, seed: u64) -> AdaptConfig {
    AdaptConfig {
        setting,
        lambda: None,
        iterations: 120,
        disc_steps: 60,
        transform_steps: 6,
        batch_size: 100,
        lr: 7e-4,
        seed,
        weighted_sampling: true,
        transform_hidden: 128,
        disc_hidden: 64,
        decoy_mode: Default::default(),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
