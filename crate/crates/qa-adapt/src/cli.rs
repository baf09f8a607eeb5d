//! The `qa-adapt` command line: dataset generation, scorer training,
//! bias probing, adaptation, evaluation, and comparison reports.
//!
//! Exit codes: 0 success, 1 user error (with usage text), 2 internal
//! error (with diagnostic). All randomness flows from `--seed`; reruns
//! with identical flags produce byte-identical artifacts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::adapt::{
    diagnostics_csv, load_transforms, save_transforms, train_adaptation, AdaptConfig, AdaptSetting,
    DecoyMode,
};
use crate::dataset::{load_dataset_dir, save_dataset_dir, Split};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, evaluate, load_report_json, run_comparison, ComparisonConfig, ComparisonReport,
    Metric, ReportFormat,
};
use crate::features::FeatureTransform;
use crate::probe::{probe_results_csv, probe_results_table, run_probe, ComponentSet, ProbeConfig};
use crate::scorer::{load_scorer, save_scorer, train_scorer, InputMode, ScorerTrainConfig};
use crate::synth::{generate_synthetic_pair, SyntheticBiasSpec};

#[derive(Parser)]
#[command(
    name = "qa-adapt",
    version,
    about = "Cross-dataset adaptation toolkit for multiple-choice visual question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset pair with a known shift
    GenSynth {
        /// TOML file describing the pair (see SyntheticBiasSpec)
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a multiple-choice scorer on a dataset directory
    TrainVqa {
        #[arg(long)]
        dataset: PathBuf,
        /// Input mode: IQC, QC, or C
        #[arg(long, default_value = "IQC")]
        mode: String,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 8192)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the dataset-origin probe between two datasets
    TrainProbe {
        #[arg(long)]
        dataset_a: PathBuf,
        #[arg(long)]
        dataset_b: PathBuf,
        /// Comma-separated component sets, e.g. I,Q,T,D,QT,QTD
        #[arg(long, default_value = "I,Q,T,D,QT,QTD")]
        components: String,
        /// Total train,val,test sizes (balanced halves from each dataset)
        #[arg(long, default_value = "80000,10000,40000")]
        sizes: String,
        #[arg(long, default_value_t = 8192)]
        hidden: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 3)]
        max_decoys: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Learn adaptation transforms from a source-trained scorer
    Adapt(AdaptArgs),
    /// Evaluate a scorer (optionally through transforms) on a dataset
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        /// Transforms checkpoint from `adapt`
        #[arg(long)]
        transforms: Option<PathBuf>,
        /// mc or vqa10
        #[arg(long, default_value = "mc")]
        metric: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the result as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Direct / DA / Within comparison across settings and seeds
    Compare(CompareArgs),
    /// Re-emit a JSON comparison report in another format
    Report {
        /// JSON report written by `compare` or `eval`
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Full (IQC) scorer checkpoint trained on the source
    #[arg(long)]
    scorer: PathBuf,
    /// Partial-information scorer checkpoint (QC or C); required for
    /// every setting except Q
    #[arg(long)]
    h_scorer: Option<PathBuf>,
    /// One of Q, T, TD, QT, QTD
    #[arg(long)]
    setting: Option<String>,
    /// Surrogate weight; defaults to 0.5 for TD/QTD and 0.1 otherwise
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    disc_steps: Option<usize>,
    #[arg(long)]
    transform_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    transform_hidden: Option<usize>,
    #[arg(long)]
    disc_hidden: Option<usize>,
    /// all or sample-one
    #[arg(long)]
    decoy_mode: Option<String>,
    #[arg(long)]
    no_weighted_sampling: bool,
    /// TOML file of AdaptConfig defaults; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Comma-separated settings, e.g. Q,T,TD,QT,QTD
    #[arg(long, default_value = "QTD")]
    settings: String,
    /// Number of seeds; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target train fraction disclosed to DA and Within, in (0, 1]
    #[arg(long, default_value_t = 1.0)]
    subsample: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value = "mc")]
    metric: String,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 20)]
    scorer_epochs: usize,
    #[arg(long, default_value_t = 8192)]
    scorer_hidden: usize,
    #[arg(long, default_value_t = 100)]
    scorer_batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    scorer_lr: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 500)]
    disc_steps: usize,
    #[arg(long, default_value_t = 5)]
    transform_steps: usize,
    #[arg(long, default_value_t = 100)]
    adapt_batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    adapt_lr: f64,
    #[arg(long, default_value_t = 128)]
    transform_hidden: usize,
    #[arg(long, default_value_t = 8192)]
    disc_hidden: usize,
    #[arg(long)]
    no_weighted_sampling: bool,
    /// Comma-separated output formats: csv, json, markdown
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out_dir: PathBuf,
}

enum CliError {
    User(String),
    Internal(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Internal(e)
    }
}

type CliResult = std::result::Result<(), CliError>;

fn user_error(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

/// Parses and dispatches; never panics on malformed input.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Internal(err)) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::GenSynth { spec, out_dir } => cmd_gen_synth(&spec, &out_dir),
        Command::TrainVqa {
            dataset,
            mode,
            epochs,
            batch_size,
            lr,
            hidden,
            seed,
            out,
        } => cmd_train_vqa(&dataset, &mode, epochs, batch_size, lr, hidden, seed, &out),
        Command::TrainProbe {
            dataset_a,
            dataset_b,
            components,
            sizes,
            hidden,
            epochs,
            batch_size,
            lr,
            max_decoys,
            seed,
            out_dir,
        } => cmd_train_probe(
            &dataset_a, &dataset_b, &components, &sizes, hidden, epochs, batch_size, lr, max_decoys,
            seed, &out_dir,
        ),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Eval {
            dataset,
            scorer,
            transforms,
            metric,
            split,
            seed,
            out,
        } => cmd_eval(&dataset, &scorer, transforms.as_deref(), &metric, &split, seed, out.as_deref()),
        Command::Compare(args) => cmd_compare(args),
        Command::Report { input, format, out } => cmd_report(&input, &format, &out),
    }
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn cmd_gen_synth(spec_path: &Path, out_dir: &Path) -> CliResult {
    let body = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: SyntheticBiasSpec =
        toml::from_str(&body).map_err(|e| user_error(format!("invalid spec file: {e}")))?;
    let pair = generate_synthetic_pair(&spec)?;
    ensure_dir(out_dir)?;
    save_dataset_dir(&pair.source, out_dir.join(&spec.source_name))?;
    save_dataset_dir(&pair.target, out_dir.join(&spec.target_name))?;

    // The realized shifts, for reference and oracle checks.
    let affine_json = |map: &crate::features::AffineMap| {
        let d = map.dim();
        let rows: Vec<Vec<f64>> = (0..d).map(|i| map.matrix().row(i).to_vec()).collect();
        serde_json::json!({ "matrix": rows, "offset": map.offset() })
    };
    let shifts = serde_json::json!({
        "question_shift": affine_json(&pair.question_shift),
        "answer_shift": affine_json(&pair.answer_shift),
        "question_squash": pair.question_squash,
        "answer_squash": pair.answer_squash,
    });
    write_text(
        &out_dir.join("shifts.json"),
        &serde_json::to_string_pretty(&shifts).map_err(Error::from)?,
    )?;
    println!(
        "wrote {} ({} triplets) and {} ({} triplets) under {}",
        spec.source_name,
        pair.source.len(),
        spec.target_name,
        pair.target.len(),
        out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_vqa(
    dataset_dir: &Path,
    mode: &str,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    hidden: usize,
    seed: u64,
    out: &Path,
) -> CliResult {
    let mode = InputMode::parse(mode).map_err(|e| user_error(e.to_string()))?;
    let dataset = load_dataset_dir(dataset_dir, &dataset_name(dataset_dir))?;
    let cfg = ScorerTrainConfig {
        epochs,
        batch_size,
        lr,
        hidden_dim: hidden,
        seed,
    };
    let model = train_scorer(&dataset, mode, &cfg)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_scorer(&model, &serde_json::json!({ "train": cfg, "dataset": dataset.name }), out)?;
    println!("trained {mode} scorer on `{}`; checkpoint at {}", dataset.name, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_probe(
    dataset_a: &Path,
    dataset_b: &Path,
    components: &str,
    sizes: &str,
    hidden: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    max_decoys: usize,
    seed: u64,
    out_dir: &Path,
) -> CliResult {
    let sets: Vec<ComponentSet> = components
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| ComponentSet::parse(s.trim()).map_err(|e| user_error(e.to_string())))
        .collect::<std::result::Result<_, _>>()?;
    if sets.is_empty() {
        return Err(user_error("no component sets given"));
    }
    let parts: Vec<usize> = sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| user_error(format!("cannot parse sizes `{sizes}` (expected train,val,test)")))?;
    let [n_train, n_val, n_test] = parts.as_slice() else {
        return Err(user_error("sizes must be three comma-separated integers"));
    };

    let a = load_dataset_dir(dataset_a, &dataset_name(dataset_a))?;
    let b = load_dataset_dir(dataset_b, &dataset_name(dataset_b))?;
    let cfg = ProbeConfig {
        hidden_dim: hidden,
        epochs,
        batch_size,
        lr,
        max_decoys,
    };
    let mut results = Vec::with_capacity(sets.len());
    for set in &sets {
        let result = run_probe(&a, &b, set, (*n_train, *n_val, *n_test), &cfg, seed)?;
        println!("{}: {:.1}%", set.label(), result.accuracy * 100.0);
        results.push(result);
    }
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("probe_results.csv"), &probe_results_csv(&results))?;
    let table = probe_results_table(&results);
    write_text(&out_dir.join("probe_results.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_adapt(args: AdaptArgs) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => {
            let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<AdaptConfig>(&body).map_err(|e| user_error(format!("invalid config file: {e}")))?
        }
        None => {
            let setting = args
                .setting
                .as_deref()
                .ok_or_else(|| user_error("--setting is required (or provide --config)"))?;
            let setting = parse_setting(setting)?;
            AdaptConfig::new(setting, 0)
        }
    };
    if args.config.is_some() {
        if let Some(s) = &args.setting {
            cfg.setting = parse_setting(s)?;
        }
    }
    if let Some(v) = args.lambda {
        if v < 0.0 {
            return Err(user_error("--lambda must be non-negative"));
        }
        cfg.lambda = Some(v);
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.disc_steps {
        cfg.disc_steps = v;
    }
    if let Some(v) = args.transform_steps {
        cfg.transform_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.transform_hidden {
        cfg.transform_hidden = v;
    }
    if let Some(v) = args.disc_hidden {
        cfg.disc_hidden = v;
    }
    if let Some(v) = &args.decoy_mode {
        cfg.decoy_mode = match v.to_ascii_lowercase().as_str() {
            "all" => DecoyMode::All,
            "sample-one" | "sample_one" => DecoyMode::SampleOne,
            other => return Err(user_error(format!("unknown decoy mode `{other}` (all or sample-one)"))),
        };
    }
    if args.no_weighted_sampling {
        cfg.weighted_sampling = false;
    }
    cfg.validate().map_err(|e| user_error(e.to_string()))?;

    let source = load_dataset_dir(&args.source, &dataset_name(&args.source))?;
    let target = load_dataset_dir(&args.target, &dataset_name(&args.target))?;
    let scorer = load_scorer(&args.scorer)?;
    let h_scorer = match &args.h_scorer {
        Some(path) => Some(load_scorer(path)?),
        None => None,
    };

    let run = train_adaptation(&source, &target, &scorer, h_scorer.as_ref(), &cfg)?;
    ensure_dir(&args.out_dir)?;
    save_transforms(&run, args.out_dir.join("transforms.qann"))?;
    write_text(&args.out_dir.join("diagnostics.csv"), &diagnostics_csv(&run.diagnostics))?;
    let last = run.diagnostics.last().expect("at least one iteration");
    println!(
        "adapted setting {} (lambda {}): final jsd estimate {:.4}, transforms at {}",
        cfg.setting,
        cfg.resolved_lambda(),
        last.jsd_estimate,
        args.out_dir.join("transforms.qann").display()
    );
    Ok(())
}

fn parse_setting(s: &str) -> std::result::Result<AdaptSetting, CliError> {
    AdaptSetting::parse(s).map_err(|_| {
        user_error(format!(
            "unknown setting `{s}`; valid settings: Q, T, T+D, Q+T, Q+T+D"
        ))
    })
}

fn cmd_eval(
    dataset_dir: &Path,
    scorer_path: &Path,
    transforms: Option<&Path>,
    metric: &str,
    split: &str,
    seed: u64,
    out: Option<&Path>,
) -> CliResult {
    let metric = Metric::parse(metric).map_err(|e| user_error(e.to_string()))?;
    let split = Split::parse(split).map_err(|e| user_error(e.to_string()))?;
    let dataset = load_dataset_dir(dataset_dir, &dataset_name(dataset_dir))?;
    let model = load_scorer(scorer_path)?;
    let loaded = match transforms {
        Some(path) => Some(load_transforms(path)?),
        None => None,
    };
    let (gq, ga) = match &loaded {
        Some((gq, ga)) => (
            Some(gq as &dyn FeatureTransform),
            Some(ga as &dyn FeatureTransform),
        ),
        None => (None, None),
    };
    let result = evaluate(metric, &model, &dataset, split, gq, ga, seed)?;
    println!(
        "{} on `{}` {}: {:.2}% over {} triplets",
        match metric {
            Metric::Mc => "multiple-choice accuracy",
            Metric::Vqa10 => "vqa10 accuracy",
        },
        dataset.name,
        split,
        result.accuracy * 100.0,
        result.n
    );
    for b in &result.per_type {
        println!("  {:>6}: {:.2}% ({} triplets)", b.question_type.name(), b.accuracy * 100.0, b.count);
    }
    if let Some(path) = out {
        write_text(path, &serde_json::to_string_pretty(&result).map_err(Error::from)?)?;
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> CliResult {
    if !(args.subsample > 0.0 && args.subsample <= 1.0) {
        return Err(user_error(format!(
            "--subsample must be in (0, 1], got {}",
            args.subsample
        )));
    }
    if args.seeds == 0 {
        return Err(user_error("--seeds must be positive"));
    }
    let settings: Vec<AdaptSetting> = args
        .settings
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_setting(s.trim()))
        .collect::<std::result::Result<_, _>>()?;
    if settings.is_empty() {
        return Err(user_error("no settings given"));
    }
    let metric = Metric::parse(&args.metric).map_err(|e| user_error(e.to_string()))?;
    let split = Split::parse(&args.split).map_err(|e| user_error(e.to_string()))?;
    let formats: Vec<ReportFormat> = args
        .format
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| ReportFormat::parse(s.trim()).map_err(|e| user_error(e.to_string())))
        .collect::<std::result::Result<_, _>>()?;

    let source = load_dataset_dir(&args.source, &dataset_name(&args.source))?;
    let target = load_dataset_dir(&args.target, &dataset_name(&args.target))?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();

    let body = || -> Result<ComparisonReport> {
        let mut report = ComparisonReport::default();
        for setting in &settings {
            let mut adapt = AdaptConfig::new(*setting, 0);
            adapt.lambda = args.lambda;
            adapt.iterations = args.iterations;
            adapt.disc_steps = args.disc_steps;
            adapt.transform_steps = args.transform_steps;
            adapt.batch_size = args.adapt_batch_size;
            adapt.lr = args.adapt_lr;
            adapt.transform_hidden = args.transform_hidden;
            adapt.disc_hidden = args.disc_hidden;
            adapt.weighted_sampling = !args.no_weighted_sampling;
            let cfg = ComparisonConfig {
                scorer: ScorerTrainConfig {
                    epochs: args.scorer_epochs,
                    batch_size: args.scorer_batch_size,
                    lr: args.scorer_lr,
                    hidden_dim: args.scorer_hidden,
                    seed: 0,
                },
                adapt,
                subsample_fraction: args.subsample,
                metric,
                eval_split: split,
            };
            let one = run_comparison(&source, &target, &cfg, &seeds)?;
            report.rows.extend(one.rows);
        }
        Ok(report)
    };

    // QA_ADAPT_THREADS caps the seed fan-out.
    let report = match std::env::var("QA_ADAPT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(threads) if threads > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| user_error(format!("cannot build thread pool: {e}")))?;
            pool.install(body)?
        }
        _ => body()?,
    };

    ensure_dir(&args.out_dir)?;
    for format in formats {
        let path = args.out_dir.join(format!("report.{}", format.extension()));
        emit_report(&report, format, &path)?;
        println!("wrote {}", path.display());
    }
    for row in &report.rows {
        println!(
            "[{}] direct {:.1}% | da {:.1}% | within {:.1}% ({} seeds)",
            row.setting,
            100.0 * row.direct_mean,
            100.0 * row.da_mean,
            100.0 * row.within_mean,
            row.seed_count
        );
    }
    Ok(())
}

fn cmd_report(input: &Path, format: &str, out: &Path) -> CliResult {
    let format = ReportFormat::parse(format).map_err(|e| user_error(e.to_string()))?;
    let report = load_report_json(input)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    emit_report(&report, format, out)?;
    println!("wrote {}", out.display());
    Ok(())
}
