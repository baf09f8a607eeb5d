//! Ablation of the discriminative-surrogate weight: lambda = 0 is
//! adversarial matching alone; raising lambda leverages the source
//! scorer's knowledge on transformed target features. Decoys only
//! matter through that term, so Q+T+D at lambda 0 equals Q+T.
//!
//! ```text
//! cargo run --release --example lambda_ablation
//! ```

mod common;

use qa_adapt::adapt::{train_adaptation, AdaptSetting};
use qa_adapt::dataset::Split;
use qa_adapt::eval::mc_accuracy;
use qa_adapt::scorer::{train_scorer, InputMode};
use qa_adapt::synth::generate_synthetic_pair;

fn main() -> Result<(), qa_adapt::Error> {
    let seeds: Vec<u64> = (0..3).collect();
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();

    for &seed in &seeds {
        let pair = generate_synthetic_pair(&common::benchmark_spec(100 + seed))?;
        let full = train_scorer(&pair.source, InputMode::Iqc, &common::scorer_cfg(seed))?;
        let judge = train_scorer(&pair.source, InputMode::Qc, &common::scorer_cfg(seed + 50))?;
        let direct = mc_accuracy(&full, &pair.target, Split::Test, None, None, seed)?.accuracy;

        let mut record = |label: &str, value: f64| {
            match rows.iter_mut().find(|(l, _)| l == label) {
                Some((_, values)) => values.push(value),
                None => rows.push((label.to_string(), vec![value])),
            }
        };
        record("direct", direct);

        for (setting, lambda) in [
            (AdaptSetting::QT, Some(0.0)),
            (AdaptSetting::QT, Some(0.1)),
            (AdaptSetting::QTD, Some(0.1)),
            (AdaptSetting::QTD, Some(0.5)),
        ] {
            let mut cfg = common::adapt_cfg(setting, seed);
            cfg.lambda = lambda;
            let run = train_adaptation(&pair.source, &pair.target, &full, Some(&judge), &cfg)?;
            let acc = mc_accuracy(
                &full,
                &pair.target,
                Split::Test,
                Some(&run.question_transform),
                Some(&run.answer_transform),
                seed,
            )?
            .accuracy;
            record(&format!("{} lambda={}", setting.name(), lambda.unwrap()), acc);
        }
        println!("seed {seed} done");
    }

    println!("\nmean target accuracy over {} seeds:", seeds.len());
    for (label, values) in &rows {
        println!("  {:<16} {:.1}%", label, 100.0 * common::mean(values));
    }
    Ok(())
}
