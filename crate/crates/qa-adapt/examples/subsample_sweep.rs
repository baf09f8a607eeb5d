//! How much disclosed target data does adaptation need? Sweep the
//! disclosed fraction of the target train split: the learned transforms
//! barely care, while a supervised model trained from scratch on the
//! same fraction falls apart.
//!
//! ```text
//! cargo run --release --example subsample_sweep
//! ```

mod common;

use qa_adapt::adapt::{train_adaptation, AdaptSetting};
use qa_adapt::dataset::{subsample, Split};
use qa_adapt::eval::mc_accuracy;
use qa_adapt::scorer::{train_scorer, InputMode};
use qa_adapt::synth::generate_synthetic_pair;

fn main() -> Result<(), qa_adapt::Error> {
    let seed = 0;
    let pair = generate_synthetic_pair(&common::benchmark_spec(100))?;
    let full = train_scorer(&pair.source, InputMode::Iqc, &common::scorer_cfg(seed))?;
    let judge = train_scorer(&pair.source, InputMode::Qc, &common::scorer_cfg(seed + 50))?;
    let direct = mc_accuracy(&full, &pair.target, Split::Test, None, None, seed)?.accuracy;
    println!("direct transfer: {:.1}%\n", 100.0 * direct);
    println!("fraction  disclosed  DA      Within");

    for denominator in [1u32, 4, 16] {
        let fraction = 1.0 / denominator as f64;
        let disclosed = subsample(&pair.target, fraction, seed)?;

        let run = train_adaptation(
            &pair.source,
            &disclosed,
            &full,
            Some(&judge),
            &common::adapt_cfg(AdaptSetting::QTD, seed),
        )?;
        let da = mc_accuracy(
            &full,
            &pair.target,
            Split::Test,
            Some(&run.question_transform),
            Some(&run.answer_transform),
            seed,
        )?
        .accuracy;

        let within_model = train_scorer(&disclosed, InputMode::Iqc, &common::scorer_cfg(seed + 70))?;
        let within = mc_accuracy(&within_model, &pair.target, Split::Test, None, None, seed)?.accuracy;

        println!(
            "1/{:<8} {:>6}     {:>5.1}%  {:>5.1}%",
            denominator,
            disclosed.train.len(),
            100.0 * da,
            100.0 * within
        );
    }
    Ok(())
}
