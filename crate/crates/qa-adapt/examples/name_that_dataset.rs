//! The origin-classification probe: how well can a classifier tell which
//! dataset a triplet came from, given different feature subsets? High
//! accuracy quantifies cross-dataset bias in that component.
//!
//! ```text
//! cargo run --release --example name_that_dataset
//! ```

mod common;

use qa_adapt::probe::{probe_results_table, run_probe, ComponentSet, ProbeConfig};
use qa_adapt::synth::generate_synthetic_pair;

fn main() -> Result<(), qa_adapt::Error> {
    let pair = generate_synthetic_pair(&common::benchmark_spec(7))?;
    let cfg = ProbeConfig {
        hidden_dim: 128,
        epochs: 10,
        batch_size: 100,
        lr: 3e-3,
        max_decoys: 3,
    };
    // Both domains have 6000 triplets; sample 2000/400/1200 balanced.
    let sizes = (2000, 400, 1200);

    let mut results = Vec::new();
    for label in ["I", "Q", "T", "D", "Q+T", "Q+D", "T+D", "Q+T+D"] {
        let set = ComponentSet::parse(label)?;
        let result = run_probe(&pair.source, &pair.target, &set, sizes, &cfg, 0)?;
        results.push(result);
    }
    print!("{}", probe_results_table(&results));
    println!("(images are drawn from one shared law here, so the I column sits near 50%)");
    Ok(())
}
