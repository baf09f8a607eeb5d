//! The full transfer experiment on one seed: train the scorer on the
//! source domain, measure direct transfer to the shifted target, learn
//! adversarial residual transforms, and compare against the within-domain
//! reference. Also shows the training diagnostics and how separable the
//! domains look to a fresh discriminator before and after adaptation.
//!
//! ```text
//! cargo run --release --example adapt_transfer
//! ```

mod common;

use qa_adapt::adapt::{adversary_accuracy, train_adaptation, AdaptConfig, AdaptSetting};
use qa_adapt::dataset::Split;
use qa_adapt::eval::mc_accuracy;
use qa_adapt::scorer::{train_scorer, InputMode};
use qa_adapt::synth::generate_synthetic_pair;

fn main() -> Result<(), qa_adapt::Error> {
    let seed = 0;
    let pair = generate_synthetic_pair(&common::benchmark_spec(100))?;

    println!("training the source scorer and the question+candidate judge...");
    let full = train_scorer(&pair.source, InputMode::Iqc, &common::scorer_cfg(seed))?;
    let judge = train_scorer(&pair.source, InputMode::Qc, &common::scorer_cfg(seed + 50))?;
    let within_model = train_scorer(&pair.target, InputMode::Iqc, &common::scorer_cfg(seed + 70))?;

    let direct = mc_accuracy(&full, &pair.target, Split::Test, None, None, seed)?.accuracy;
    let within = mc_accuracy(&within_model, &pair.target, Split::Test, None, None, seed)?.accuracy;

    let cfg = common::adapt_cfg(AdaptSetting::QTD, seed);
    println!(
        "adapting (setting {}, lambda {}, {} iterations x ({} disc + {} transform steps))...",
        cfg.setting,
        cfg.resolved_lambda(),
        cfg.iterations,
        cfg.disc_steps,
        cfg.transform_steps
    );
    let start = std::time::Instant::now();
    let run = train_adaptation(&pair.source, &pair.target, &full, Some(&judge), &cfg)?;
    println!("adaptation took {:?}", start.elapsed());

    for d in run.diagnostics.iter().step_by(20) {
        println!(
            "  iter {:>4}: disc loss {:.3} | transform loss {:.3} | surrogate {:.3} | jsd estimate {:.3}",
            d.iteration, d.disc_loss, d.transform_loss, d.surrogate_loss, d.jsd_estimate
        );
    }

    let adapted = mc_accuracy(
        &full,
        &pair.target,
        Split::Test,
        Some(&run.question_transform),
        Some(&run.answer_transform),
        seed,
    )?
    .accuracy;

    let eval_cfg = AdaptConfig {
        disc_steps: 80,
        ..cfg
    };
    let adv_before = adversary_accuracy(&pair.source, &pair.target, None, None, &eval_cfg, seed)?;
    let adv_after = adversary_accuracy(
        &pair.source,
        &pair.target,
        Some(&run.question_transform),
        Some(&run.answer_transform),
        &eval_cfg,
        seed,
    )?;

    println!();
    println!("direct transfer : {:.1}%", 100.0 * direct);
    println!("with adaptation : {:.1}%", 100.0 * adapted);
    println!("within-domain   : {:.1}%  (supervised reference bound)", 100.0 * within);
    println!(
        "fresh discriminator accuracy: {:.1}% before -> {:.1}% after adaptation",
        100.0 * adv_before,
        100.0 * adv_after
    );
    Ok(())
}
