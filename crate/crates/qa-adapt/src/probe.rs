//! The dataset-origin probe: train a binary classifier to tell which of
//! two datasets a triplet came from, using any subset of its
//! image/question/answer/decoy features. High held-out accuracy means the
//! two datasets are separably biased in those components.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Triplet, VqaDataset};
use crate::error::{Error, Result};
use crate::features::{fnv64, FeatureVector};
use crate::nn::{bce_loss, mlp_backward, mlp_forward, AdamState, Matrix, MlpParams, OutputActivation};

/// Which triplet components feed the probe, concatenated in the canonical
/// order image | question | correct answer | decoy mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub image: bool,
    pub question: bool,
    pub answer: bool,
    pub decoys: bool,
}

impl ComponentSet {
    pub fn new(image: bool, question: bool, answer: bool, decoys: bool) -> Result<Self> {
        if !(image || question || answer || decoys) {
            return Err(Error::InvalidConfig("component set must be nonempty".into()));
        }
        Ok(ComponentSet {
            image,
            question,
            answer,
            decoys,
        })
    }

    /// Parses labels like `Q`, `T+D`, `IQTD`, or `q,t`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = ComponentSet {
            image: false,
            question: false,
            answer: false,
            decoys: false,
        };
        for c in s.chars() {
            match c.to_ascii_uppercase() {
                'I' => set.image = true,
                'Q' => set.question = true,
                'T' => set.answer = true,
                'D' => set.decoys = true,
                '+' | ',' | ' ' => {}
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown component `{other}` (expected I, Q, T, D)"
                    )))
                }
            }
        }
        ComponentSet::new(set.image, set.question, set.answer, set.decoys)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.image {
            parts.push("I");
        }
        if self.question {
            parts.push("Q");
        }
        if self.answer {
            parts.push("T");
        }
        if self.decoys {
            parts.push("D");
        }
        parts.join("+")
    }

    /// True when every component of `self` is also in `other`.
    pub fn subset_of(&self, other: &ComponentSet) -> bool {
        (!self.image || other.image)
            && (!self.question || other.question)
            && (!self.answer || other.answer)
            && (!self.decoys || other.decoys)
    }
}

impl std::fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Builds the probe input for one triplet: selected components
/// concatenated in canonical order. The decoy component is the mean of up
/// to `max_decoys` decoy vectors, subsampled deterministically per
/// (seed, triplet id).
pub fn build_probe_features(
    triplet: &Triplet,
    image: Option<&FeatureVector>,
    components: &ComponentSet,
    max_decoys: usize,
    seed: u64,
) -> Result<FeatureVector> {
    let mut out = Vec::new();
    if components.image {
        let image = image.ok_or_else(|| Error::MissingComponent("image feature for probe".into()))?;
        out.extend_from_slice(image.as_slice());
    }
    if components.question {
        out.extend_from_slice(triplet.question_feat.as_slice());
    }
    if components.answer {
        out.extend_from_slice(triplet.correct.feat.as_slice());
    }
    if components.decoys {
        if triplet.decoys.is_empty() {
            return Err(Error::MissingComponent(format!("triplet {} has no decoys", triplet.id)));
        }
        let k = triplet.decoys.len();
        let take = max_decoys.max(1).min(k);
        let mut indices: Vec<usize> = (0..k).collect();
        if take < k {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv64(triplet.id.as_bytes()));
            indices.shuffle(&mut rng);
            indices.truncate(take);
            indices.sort_unstable();
        }
        let dim = triplet.decoys[0].feat.len();
        let mut mean = vec![0.0; dim];
        for &i in &indices {
            for (m, v) in mean.iter_mut().zip(triplet.decoys[i].feat.as_slice()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= take as f64;
        }
        out.extend_from_slice(&mean);
    }
    FeatureVector::new(out)
}

/// Probe training configuration. The classifier is the same architecture
/// as the scorer: one hidden ReLU layer into a sigmoid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_decoys: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_dim: 8192,
            epochs: 20,
            batch_size: 100,
            lr: 1e-4,
            max_decoys: 3,
        }
    }
}

/// Outcome of one probe run; `accuracy` is measured on the held-out test
/// split only.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub components: ComponentSet,
    pub accuracy: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

/// Feature rows with binary labels, already split.
pub(crate) struct BinarySplits {
    train: (Matrix, Matrix),
    val: Option<(Matrix, Matrix)>,
    test: (Matrix, Matrix),
}

fn stack(rows_a: &[Vec<f64>], rows_b: &[Vec<f64>]) -> Result<(Matrix, Matrix)> {
    let dim = rows_a
        .first()
        .or_else(|| rows_b.first())
        .map(|r| r.len())
        .ok_or_else(|| Error::EmptyInput("no probe rows".into()))?;
    let n = rows_a.len() + rows_b.len();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for row in rows_a {
        data.extend_from_slice(row);
        labels.push(1.0);
    }
    for row in rows_b {
        data.extend_from_slice(row);
        labels.push(0.0);
    }
    Ok((Matrix::from_vec(n, dim, data)?, Matrix::from_vec(n, 1, labels)?))
}

fn accuracy_on(params: &MlpParams, data: &(Matrix, Matrix)) -> Result<f64> {
    let (x, y) = data;
    let (out, _) = mlp_forward(params, x)?;
    let mut correct = 0usize;
    for i in 0..x.rows() {
        let predicted = out.get(i, 0) > 0.5;
        let actual = y.get(i, 0) > 0.5;
        correct += (predicted == actual) as usize;
    }
    Ok(correct as f64 / x.rows() as f64)
}

/// Trains the binary classifier with per-epoch shuffling and, when a
/// validation split is present, keeps the epoch checkpoint with the best
/// validation accuracy (earliest epoch wins ties). Returns the selected
/// parameters and their test accuracy.
pub(crate) fn fit_binary_classifier(splits: &BinarySplits, cfg: &ProbeConfig, seed: u64) -> Result<(MlpParams, f64)> {
    let (train_x, train_y) = &splits.train;
    let in_dim = train_x.cols();
    let mut params = MlpParams::new(in_dim, cfg.hidden_dim, 1, OutputActivation::Sigmoid, seed);
    let mut adam = AdamState::new(&params, cfg.lr);

    let mut best: Option<(f64, MlpParams)> = None;
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xb10b);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * in_dim);
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(train_x.row(i));
                ys.push(train_y.get(i, 0));
            }
            let x = Matrix::from_vec(chunk.len(), in_dim, data)?;
            let y = Matrix::from_vec(chunk.len(), 1, ys)?;
            let (out, cache) = mlp_forward(&params, &x)?;
            let (_, grad) = bce_loss(&out, &y)?;
            let (grads, _) = mlp_backward(&params, &cache, &grad)?;
            adam.step(&mut params, &grads);
        }
        if let Some(val) = &splits.val {
            let acc = accuracy_on(&params, val)?;
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, params.clone()));
            }
        }
    }
    let selected = best.map(|(_, p)| p).unwrap_or(params);
    let test_acc = accuracy_on(&selected, &splits.test)?;
    Ok((selected, test_acc))
}

/// Samples balanced halves from two row collections into
/// train/val/test splits. `sizes` are total split sizes and must be even.
pub(crate) fn balanced_splits(
    rows_a: &[Vec<f64>],
    rows_b: &[Vec<f64>],
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<BinarySplits> {
    let (n_train, n_val, n_test) = sizes;
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig("train and test sizes must be positive".into()));
    }
    if n_train % 2 != 0 || n_val % 2 != 0 || n_test % 2 != 0 {
        return Err(Error::InvalidConfig("split sizes must be even for balanced halves".into()));
    }
    let need = (n_train + n_val + n_test) / 2;
    for (side, rows) in [("first", rows_a), ("second", rows_b)] {
        if rows.len() < need {
            return Err(Error::InsufficientData(format!(
                "{side} collection has {} rows, need {need}",
                rows.len()
            )));
        }
    }

    let pick = |rows: &[Vec<f64>], stream: u64| -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.shuffle(&mut rng);
        idx.into_iter().take(need).map(|i| rows[i].clone()).collect()
    };
    let a = pick(rows_a, 0);
    let b = pick(rows_b, 1);

    let (ht, hv) = (n_train / 2, n_val / 2);
    let slice = |rows: &[Vec<f64>], lo: usize, hi: usize| rows[lo..hi].to_vec();
    let train = stack(&slice(&a, 0, ht), &slice(&b, 0, ht))?;
    let val = if n_val > 0 {
        Some(stack(&slice(&a, ht, ht + hv), &slice(&b, ht, ht + hv))?)
    } else {
        None
    };
    let test = stack(&slice(&a, ht + hv, need), &slice(&b, ht + hv, need))?;
    Ok(BinarySplits { train, val, test })
}

fn probe_rows(dataset: &VqaDataset, components: &ComponentSet, max_decoys: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    dataset
        .all_triplets()
        .map(|t| {
            let image = components.image.then(|| dataset.image_feat(t));
            Ok(build_probe_features(t, image.as_ref(), components, max_decoys, seed)?.into_vec())
        })
        .collect()
}

/// Runs one origin-probe experiment between two datasets: sample balanced
/// halves into `sizes`, train the classifier, and report held-out test
/// accuracy with validation-based epoch selection.
pub fn run_probe(
    dataset_a: &VqaDataset,
    dataset_b: &VqaDataset,
    components: &ComponentSet,
    sizes: (usize, usize, usize),
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let rows_a = probe_rows(dataset_a, components, cfg.max_decoys, seed)?;
    let rows_b = probe_rows(dataset_b, components, cfg.max_decoys, seed)?;
    let splits = balanced_splits(&rows_a, &rows_b, sizes, seed)?;
    let (_, accuracy) = fit_binary_classifier(&splits, cfg, seed)?;
    Ok(ProbeResult {
        components: *components,
        accuracy,
        train_size: sizes.0,
        val_size: sizes.1,
        test_size: sizes.2,
    })
}

/// How separable two raw feature collections are: trains a fresh
/// classifier on balanced 60/10/30 splits and returns its held-out
/// accuracy. 0.5 means indistinguishable.
pub fn separability(rows_a: &[Vec<f64>], rows_b: &[Vec<f64>], cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let n = rows_a.len().min(rows_b.len());
    if n < 10 {
        return Err(Error::InsufficientData(format!("need at least 10 rows per side, have {n}")));
    }
    let train_half = n * 6 / 10;
    let val_half = n / 10;
    let test_half = n - train_half - val_half;
    let splits = balanced_splits(rows_a, rows_b, (2 * train_half, 2 * val_half, 2 * test_half), seed)?;
    let (_, acc) = fit_binary_classifier(&splits, cfg, seed)?;
    Ok(acc)
}

/// One CSV row per component set.
pub fn probe_results_csv(results: &[ProbeResult]) -> String {
    let mut out = String::from("components,accuracy,train,val,test\n");
    for r in results {
        out.push_str(&format!(
            "{},{:.4},{},{},{}\n",
            r.components.label(),
            r.accuracy,
            r.train_size,
            r.val_size,
            r.test_size
        ));
    }
    out
}

/// Human-readable table mirroring the columns-of-components layout.
pub fn probe_results_table(results: &[ProbeResult]) -> String {
    let mut header = String::from("Information ");
    let mut row = String::from("Accuracy    ");
    for r in results {
        let label = r.components.label();
        let cell = format!("{:>8}", label);
        header.push_str(&cell);
        row.push_str(&format!("{:>7.1}%", r.accuracy * 100.0));
    }
    format!("{header}\n{row}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_pair, ShiftSpec, SyntheticBiasSpec};

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    fn probe_spec(answer_offset: Option<f64>) -> SyntheticBiasSpec {
        SyntheticBiasSpec {
            source_name: "a".into(),
            target_name: "b".into(),
            n_train: 500,
            n_val: 100,
            n_test: 150,
            text_dim: 8,
            image_dim: 8,
            decoys: 3,
            concept_count: 10,
            question_shift: None,
            answer_shift: answer_offset.map(|c| ShiftSpec::Explicit {
                matrix: (0..8)
                    .map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
                offset: vec![c; 8],
            }),
            question_squash: None,
            answer_squash: None,
            type_distribution: [0.4, 0.2, 0.1, 0.1, 0.1, 0.05, 0.05],
            target_type_distribution: None,
            phrasing_noise: 0.1,
            seed: 23,
        }
    }

    fn desk_cfg() -> ProbeConfig {
        ProbeConfig {
            hidden_dim: 32,
            epochs: 8,
            batch_size: 50,
            lr: 3e-3,
            max_decoys: 3,
        }
    }

    fn triplet_with_decoys(decoys: &[&[f64]]) -> Triplet {
        Triplet {
            id: "p0".into(),
            image_id: 0,
            question: "what is this".into(),
            question_feat: fv(&[1.0, 2.0]),
            correct: crate::dataset::Answer {
                text: "a".into(),
                feat: fv(&[3.0, 4.0]),
            },
            decoys: decoys
                .iter()
                .enumerate()
                .map(|(i, d)| crate::dataset::Answer {
                    text: format!("d{i}"),
                    feat: fv(d),
                })
                .collect(),
            gt_answers: None,
        }
    }

    #[test]
    fn feature_layout_per_component_set() {
        let t = triplet_with_decoys(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let q_only = build_probe_features(&t, None, &ComponentSet::parse("Q").unwrap(), 3, 0).unwrap();
        assert_eq!(q_only.as_slice(), t.question_feat.as_slice());

        let qt = build_probe_features(&t, None, &ComponentSet::parse("QT").unwrap(), 3, 0).unwrap();
        assert_eq!(qt.as_slice(), &[1.0, 2.0, 3.0, 4.0]);

        // D is the mean of all three decoys when max_decoys covers them.
        let d = build_probe_features(&t, None, &ComponentSet::parse("D").unwrap(), 3, 0).unwrap();
        assert_eq!(d.as_slice(), &[2.0, 2.0]);

        // Image component requires the image feature.
        assert!(build_probe_features(&t, None, &ComponentSet::parse("I").unwrap(), 3, 0).is_err());
        let with_image =
            build_probe_features(&t, Some(&fv(&[9.0, 8.0])), &ComponentSet::parse("IQ").unwrap(), 3, 0).unwrap();
        assert_eq!(with_image.as_slice(), &[9.0, 8.0, 1.0, 2.0]);
    }

    #[test]
    fn decoy_subsample_is_deterministic() {
        let t = triplet_with_decoys(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0], &[10.0, 10.0]]);
        let set = ComponentSet::parse("D").unwrap();
        let a = build_probe_features(&t, None, &set, 2, 7).unwrap();
        let b = build_probe_features(&t, None, &set, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = build_probe_features(&t, None, &set, 2, 8).unwrap();
        // Different seed may pick different decoys; both are means of two.
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn component_set_parse_and_labels() {
        assert_eq!(ComponentSet::parse("Q+T+D").unwrap().label(), "Q+T+D");
        assert_eq!(ComponentSet::parse("iqtd").unwrap().label(), "I+Q+T+D");
        assert!(ComponentSet::parse("").is_err());
        assert!(ComponentSet::parse("X").is_err());
        let q = ComponentSet::parse("Q").unwrap();
        let qt = ComponentSet::parse("QT").unwrap();
        assert!(q.subset_of(&qt));
        assert!(!qt.subset_of(&q));
    }

    #[test]
    fn identical_law_pair_probes_at_chance() {
        let pair = generate_synthetic_pair(&probe_spec(None)).unwrap();
        let mut accs = Vec::new();
        for seed in 0..5 {
            let r = run_probe(
                &pair.source,
                &pair.target,
                &ComponentSet::parse("QT").unwrap(),
                (600, 100, 400),
                &desk_cfg(),
                seed,
            )
            .unwrap();
            accs.push(r.accuracy);
        }
        accs.sort_by(f64::total_cmp);
        let median = accs[2];
        assert!((0.45..=0.55).contains(&median), "median accuracy {median}");
    }

    #[test]
    fn answer_shift_is_visible_only_through_answers() {
        let pair = generate_synthetic_pair(&probe_spec(Some(1.5))).unwrap();
        let t_probe = run_probe(
            &pair.source,
            &pair.target,
            &ComponentSet::parse("T").unwrap(),
            (600, 100, 400),
            &desk_cfg(),
            1,
        )
        .unwrap();
        assert!(t_probe.accuracy > 0.9, "T probe accuracy {}", t_probe.accuracy);

        let q_probe = run_probe(
            &pair.source,
            &pair.target,
            &ComponentSet::parse("Q").unwrap(),
            (600, 100, 400),
            &desk_cfg(),
            1,
        )
        .unwrap();
        assert!(
            (0.44..=0.56).contains(&q_probe.accuracy),
            "Q probe accuracy {}",
            q_probe.accuracy
        );
    }

    #[test]
    fn monotone_information_on_nested_sets() {
        // More components never hurt much: acc(Q+T) >= acc(Q) - 2%.
        let pair = generate_synthetic_pair(&probe_spec(Some(0.8))).unwrap();
        let sizes = (600, 100, 400);
        let q = run_probe(&pair.source, &pair.target, &ComponentSet::parse("Q").unwrap(), sizes, &desk_cfg(), 3)
            .unwrap();
        let qt = run_probe(&pair.source, &pair.target, &ComponentSet::parse("QT").unwrap(), sizes, &desk_cfg(), 3)
            .unwrap();
        assert!(qt.accuracy >= q.accuracy - 0.02, "Q {} vs Q+T {}", q.accuracy, qt.accuracy);
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let pair = generate_synthetic_pair(&probe_spec(None)).unwrap();
        let result = run_probe(
            &pair.source,
            &pair.target,
            &ComponentSet::parse("Q").unwrap(),
            (10_000, 1_000, 1_000),
            &desk_cfg(),
            0,
        );
        assert!(matches!(result, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn csv_and_table_layout() {
        let results = vec![
            ProbeResult {
                components: ComponentSet::parse("Q").unwrap(),
                accuracy: 0.763,
                train_size: 80,
                val_size: 10,
                test_size: 40,
            },
            ProbeResult {
                components: ComponentSet::parse("QTD").unwrap(),
                accuracy: 0.975,
                train_size: 80,
                val_size: 10,
                test_size: 40,
            },
        ];
        let csv = probe_results_csv(&results);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("Q,0.7630"));
        let table = probe_results_table(&results);
        assert_eq!(table.lines().count(), 2);
        assert!(table.contains("Q+T+D"));
    }
}
