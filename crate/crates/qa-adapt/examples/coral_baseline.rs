//! Correlation alignment versus adversarial transforms. On a pure mean
//! shift both repair the transfer gap; once the shift bends the feature
//! space (affine plus coordinate-wise squashing), matching first and
//! second moments is not enough and the adversarial transforms pull
//! ahead.
//!
//! ```text
//! cargo run --release --example coral_baseline
//! ```

mod common;

use qa_adapt::adapt::{coral_align, train_adaptation, AdaptSetting};
use qa_adapt::dataset::{Split, VqaDataset};
use qa_adapt::eval::mc_accuracy;
use qa_adapt::features::FeatureVector;
use qa_adapt::scorer::{train_scorer, InputMode};
use qa_adapt::synth::{generate_synthetic_pair, ShiftSpec};

fn questions(ds: &VqaDataset) -> Vec<FeatureVector> {
    ds.train.iter().map(|t| t.question_feat.clone()).collect()
}

fn answers(ds: &VqaDataset) -> Vec<FeatureVector> {
    ds.train.iter().map(|t| t.correct.feat.clone()).collect()
}

fn main() -> Result<(), qa_adapt::Error> {
    let seed = 0;

    // Benchmark 1: translation only.
    let mut spec = common::benchmark_spec(200);
    let translation = ShiftSpec::Explicit {
        matrix: (0..16)
            .map(|i| (0..16).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
        offset: vec![0.4; 16],
    };
    spec.question_shift = Some(translation.clone());
    spec.answer_shift = Some(translation);
    let pair = generate_synthetic_pair(&spec)?;
    let full = train_scorer(&pair.source, InputMode::Iqc, &common::scorer_cfg(seed))?;
    let direct = mc_accuracy(&full, &pair.target, Split::Test, None, None, seed)?.accuracy;
    let cq = coral_align(&questions(&pair.source), &questions(&pair.target))?;
    let ca = coral_align(&answers(&pair.source), &answers(&pair.target))?;
    let coral = mc_accuracy(&full, &pair.target, Split::Test, Some(&cq), Some(&ca), seed)?.accuracy;
    println!("mean shift only : direct {:.1}% | coral {:.1}%", 100.0 * direct, 100.0 * coral);

    // Benchmark 2: rotation + offset + squashing.
    let mut spec = common::benchmark_spec(300);
    spec.question_squash = Some(1.0);
    spec.answer_squash = Some(1.0);
    let pair = generate_synthetic_pair(&spec)?;
    let full = train_scorer(&pair.source, InputMode::Iqc, &common::scorer_cfg(seed))?;
    let judge = train_scorer(&pair.source, InputMode::Qc, &common::scorer_cfg(seed + 50))?;
    let direct = mc_accuracy(&full, &pair.target, Split::Test, None, None, seed)?.accuracy;
    let cq = coral_align(&questions(&pair.source), &questions(&pair.target))?;
    let ca = coral_align(&answers(&pair.source), &answers(&pair.target))?;
    let coral = mc_accuracy(&full, &pair.target, Split::Test, Some(&cq), Some(&ca), seed)?.accuracy;
    let run = train_adaptation(
        &pair.source,
        &pair.target,
        &full,
        Some(&judge),
        &common::adapt_cfg(AdaptSetting::QTD, seed),
    )?;
    let adversarial = mc_accuracy(
        &full,
        &pair.target,
        Split::Test,
        Some(&run.question_transform),
        Some(&run.answer_transform),
        seed,
    )?
    .accuracy;
    println!(
        "nonlinear shift : direct {:.1}% | coral {:.1}% | adversarial {:.1}%",
        100.0 * direct,
        100.0 * coral,
        100.0 * adversarial
    );
    Ok(())
}
