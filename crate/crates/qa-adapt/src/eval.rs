//! Evaluation: multiple-choice accuracy with seeded candidate shuffling,
//! the ten-annotator exact-match metric, per-question-type breakdowns,
//! and the direct / adapted / within-domain comparison protocol.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{train_adaptation, AdaptConfig};
use crate::dataset::{subsample, Split, VqaDataset};
use crate::error::{Error, Result};
use crate::features::{FeatureTransform, QuestionType};
use crate::scorer::{predict_among, train_scorer, InputMode, ScorerModel, ScorerTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Fraction of triplets where the chosen candidate is the correct one.
    Mc,
    /// Exact matches of the chosen text among 10 annotations, / 3, clipped at 1.
    Vqa10,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Metric> {
        match s.to_ascii_lowercase().as_str() {
            "mc" => Ok(Metric::Mc),
            "vqa10" => Ok(Metric::Vqa10),
            other => Err(Error::InvalidConfig(format!("unknown metric `{other}` (expected mc or vqa10)"))),
        }
    }
}

/// Per-question-type slice of an evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct TypeBreakdown {
    pub question_type: QuestionType,
    pub credit: f64,
    pub count: usize,
    pub accuracy: f64,
}

/// Outcome of evaluating one model on one split.
#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub metric: Metric,
    pub accuracy: f64,
    pub n: usize,
    pub per_type: Vec<TypeBreakdown>,
}

fn aggregate(metric: Metric, credits: &[(QuestionType, f64)]) -> EvalResult {
    let mut credit_by_type = [0.0f64; 7];
    let mut count_by_type = [0usize; 7];
    let mut total = 0.0;
    for &(qtype, credit) in credits {
        credit_by_type[qtype.index()] += credit;
        count_by_type[qtype.index()] += 1;
        total += credit;
    }
    let per_type = QuestionType::ALL
        .iter()
        .enumerate()
        .filter(|(i, _)| count_by_type[*i] > 0)
        .map(|(i, &qtype)| TypeBreakdown {
            question_type: qtype,
            credit: credit_by_type[i],
            count: count_by_type[i],
            accuracy: credit_by_type[i] / count_by_type[i] as f64,
        })
        .collect();
    EvalResult {
        metric,
        accuracy: total / credits.len() as f64,
        n: credits.len(),
        per_type,
    }
}

/// Evaluates one triplet with a seeded candidate shuffle, returning the
/// index (in canonical order) the model chose.
fn choose_shuffled(
    model: &ScorerModel,
    dataset: &VqaDataset,
    triplet: &crate::dataset::Triplet,
    question_transform: Option<&dyn FeatureTransform>,
    answer_transform: Option<&dyn FeatureTransform>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let feats = triplet.candidate_feats();
    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.shuffle(rng);
    let shuffled: Vec<&crate::features::FeatureVector> = order.iter().map(|&i| feats[i]).collect();
    let image = model.mode.uses_image().then(|| dataset.image_feat(triplet));
    let chosen = predict_among(
        model,
        image.as_ref(),
        Some(&triplet.question_feat),
        &shuffled,
        question_transform,
        answer_transform,
    )?;
    Ok(order[chosen])
}

/// Multiple-choice accuracy over a split. Candidate order is shuffled per
/// triplet (seeded) so the tie-break index carries no information.
pub fn mc_accuracy(
    model: &ScorerModel,
    dataset: &VqaDataset,
    split: Split,
    question_transform: Option<&dyn FeatureTransform>,
    answer_transform: Option<&dyn FeatureTransform>,
    seed: u64,
) -> Result<EvalResult> {
    let triplets = dataset.split(split);
    if triplets.is_empty() {
        return Err(Error::EmptyInput(format!("{split} split of `{}`", dataset.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xe7a1);
    let mut credits = Vec::with_capacity(triplets.len());
    for t in triplets {
        let picked = choose_shuffled(model, dataset, t, question_transform, answer_transform, &mut rng)?;
        credits.push((t.question_type(), (picked == 0) as u8 as f64));
    }
    Ok(aggregate(Metric::Mc, &credits))
}

fn normalize_answer(text: &str) -> String {
    text.trim().to_lowercase()
}

/// The ten-annotator metric: credit per triplet is
/// `min(matches / 3, 1)` where `matches` counts exact (lowercased,
/// trimmed) occurrences of the chosen candidate's text among the ten
/// ground-truth answers.
pub fn vqa10_accuracy(
    model: &ScorerModel,
    dataset: &VqaDataset,
    split: Split,
    question_transform: Option<&dyn FeatureTransform>,
    answer_transform: Option<&dyn FeatureTransform>,
    seed: u64,
) -> Result<EvalResult> {
    let triplets = dataset.split(split);
    if triplets.is_empty() {
        return Err(Error::EmptyInput(format!("{split} split of `{}`", dataset.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xe7a1);
    let mut credits = Vec::with_capacity(triplets.len());
    for t in triplets {
        let gt = t.gt_answers.as_ref().ok_or_else(|| Error::MissingComponent(format!(
            "triplet {} has no gt_answers; the vqa10 metric needs 10 annotations",
            t.id
        )))?;
        let picked = choose_shuffled(model, dataset, t, question_transform, answer_transform, &mut rng)?;
        let chosen_text = normalize_answer(t.candidate_texts()[picked]);
        let matches = gt.iter().filter(|a| normalize_answer(a) == chosen_text).count();
        let credit = (matches as f64 / 3.0).min(1.0);
        credits.push((t.question_type(), credit));
    }
    Ok(aggregate(Metric::Vqa10, &credits))
}

pub fn evaluate(
    metric: Metric,
    model: &ScorerModel,
    dataset: &VqaDataset,
    split: Split,
    question_transform: Option<&dyn FeatureTransform>,
    answer_transform: Option<&dyn FeatureTransform>,
    seed: u64,
) -> Result<EvalResult> {
    match metric {
        Metric::Mc => mc_accuracy(model, dataset, split, question_transform, answer_transform, seed),
        Metric::Vqa10 => vqa10_accuracy(model, dataset, split, question_transform, answer_transform, seed),
    }
}

/// Configuration for the direct / adapted / within protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub scorer: ScorerTrainConfig,
    pub adapt: AdaptConfig,
    /// Target train fraction disclosed to adaptation and to the
    /// within-domain reference model.
    #[serde(default = "default_fraction")]
    pub subsample_fraction: f64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_split")]
    pub eval_split: Split,
}

fn default_fraction() -> f64 {
    1.0
}

fn default_metric() -> Metric {
    Metric::Mc
}

fn default_split() -> Split {
    Split::Test
}

/// One aggregated row of the transfer table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub source_name: String,
    pub target_name: String,
    pub setting: String,
    pub lambda: f64,
    pub subsample_fraction: f64,
    pub seed_count: usize,
    pub direct_mean: f64,
    pub direct_std: f64,
    pub da_mean: f64,
    pub da_std: f64,
    pub within_mean: f64,
    pub within_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

/// Per-seed raw numbers behind a row, useful for diagnostics.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub direct: f64,
    pub da: f64,
    pub within: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z ^ (z >> 31)
}

/// Runs the protocol for one seed: train the full scorer on the source,
/// evaluate it directly on the target, adapt transforms on the disclosed
/// target fraction and evaluate through them, and train the
/// within-domain reference on the same disclosed fraction.
pub fn run_comparison_seed(
    source: &VqaDataset,
    target: &VqaDataset,
    cfg: &ComparisonConfig,
    seed: u64,
) -> Result<SeedOutcome> {
    let disclosed = if cfg.subsample_fraction < 1.0 {
        subsample(target, cfg.subsample_fraction, mix_seed(seed, 1))?
    } else {
        target.clone()
    };

    let scorer_cfg = ScorerTrainConfig {
        seed: mix_seed(seed, 2),
        ..cfg.scorer.clone()
    };
    let full_model = train_scorer(source, InputMode::Iqc, &scorer_cfg)?;
    let direct = evaluate(cfg.metric, &full_model, target, cfg.eval_split, None, None, seed)?.accuracy;

    let surrogate = match cfg.adapt.setting.surrogate_mode() {
        Some(mode) => Some(train_scorer(
            source,
            mode,
            &ScorerTrainConfig {
                seed: mix_seed(seed, 3),
                ..cfg.scorer.clone()
            },
        )?),
        None => None,
    };
    let adapt_cfg = AdaptConfig {
        seed: mix_seed(seed, 4),
        ..cfg.adapt.clone()
    };
    let run = train_adaptation(source, &disclosed, &full_model, surrogate.as_ref(), &adapt_cfg)?;
    let da = evaluate(
        cfg.metric,
        &full_model,
        target,
        cfg.eval_split,
        Some(&run.question_transform),
        Some(&run.answer_transform),
        seed,
    )?
    .accuracy;

    if disclosed.train.is_empty() {
        return Err(Error::EmptyInput("within-domain reference needs target train triplets".into()));
    }
    let within_model = train_scorer(
        &disclosed,
        InputMode::Iqc,
        &ScorerTrainConfig {
            seed: mix_seed(seed, 5),
            ..cfg.scorer.clone()
        },
    )?;
    let within = evaluate(cfg.metric, &within_model, target, cfg.eval_split, None, None, seed)?.accuracy;

    Ok(SeedOutcome {
        seed,
        direct,
        da,
        within,
    })
}

/// Runs the protocol over several seeds (in parallel; each seed is
/// independently deterministic) and aggregates one report row.
pub fn run_comparison(
    source: &VqaDataset,
    target: &VqaDataset,
    cfg: &ComparisonConfig,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("seed list".into()));
    }
    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|&seed| run_comparison_seed(source, target, cfg, seed))
        .collect::<Result<_>>()?;

    let (direct_mean, direct_std) = mean_std(&outcomes.iter().map(|o| o.direct).collect::<Vec<_>>());
    let (da_mean, da_std) = mean_std(&outcomes.iter().map(|o| o.da).collect::<Vec<_>>());
    let (within_mean, within_std) = mean_std(&outcomes.iter().map(|o| o.within).collect::<Vec<_>>());

    Ok(ComparisonReport {
        rows: vec![ComparisonRow {
            source_name: source.name.clone(),
            target_name: target.name.clone(),
            setting: cfg.adapt.setting.name().to_string(),
            lambda: cfg.adapt.resolved_lambda(),
            subsample_fraction: cfg.subsample_fraction,
            seed_count: seeds.len(),
            direct_mean,
            direct_std,
            da_mean,
            da_std,
            within_mean,
            within_std,
        }],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::InvalidConfig(format!(
                "unknown report format `{other}` (expected csv, json, or markdown)"
            ))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

pub fn report_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(
        "source,target,setting,lambda,subsample_fraction,seed_count,direct_mean,direct_std,da_mean,da_std,within_mean,within_std\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.source_name,
            r.target_name,
            r.setting,
            r.lambda,
            r.subsample_fraction,
            r.seed_count,
            r.direct_mean,
            r.direct_std,
            r.da_mean,
            r.da_std,
            r.within_mean,
            r.within_std
        ));
    }
    out
}

pub fn report_json(report: &ComparisonReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Markdown table with one row per (source, target, setting) cell and
/// direct/adapted/within columns.
pub fn report_markdown(report: &ComparisonReport) -> String {
    let mut out = String::from(
        "| source | target | setting | lambda | fraction | seeds | Direct | DA | Within |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.1} ± {:.1} | {:.1} ± {:.1} | {:.1} ± {:.1} |\n",
            r.source_name,
            r.target_name,
            r.setting,
            r.lambda,
            r.subsample_fraction,
            r.seed_count,
            100.0 * r.direct_mean,
            100.0 * r.direct_std,
            100.0 * r.da_mean,
            100.0 * r.da_std,
            100.0 * r.within_mean,
            100.0 * r.within_std
        ));
    }
    out
}

/// Writes the report in the given format; extension comes from the format.
pub fn emit_report(report: &ComparisonReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::EmptyInput("comparison report".into()));
    }
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Markdown => report_markdown(report),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads back a JSON report written by [`emit_report`].
pub fn load_report_json(path: impl AsRef<Path>) -> Result<ComparisonReport> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&body)?)
}
