//! Adversarial cross-dataset adaptation: learns residual transforms on
//! target-domain question/answer features so that (a) a freshly trained
//! domain discriminator cannot tell transformed target features from
//! source features — an adversarial stand-in for minimizing the
//! Jensen-Shannon divergence between the feature distributions — and (b)
//! the transformed features keep scoring correctly under a frozen
//! partial-information scorer trained on the source. The source scorer is
//! never retrained; only the transforms move.

mod coral;

pub use coral::coral_align;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{question_type_counts, Triplet, VqaDataset};
use crate::error::{Error, Result};
use crate::features::{FeatureTransform, FeatureVector};
use crate::nn::{
    bce_loss, load_checkpoint, mlp_backward, mlp_forward, save_checkpoint, AdamState, ForwardCache,
    Matrix, MlpGrads, MlpParams, OutputActivation, BCE_EPS,
};
use crate::scorer::{InputMode, ScorerModel};

/// Which target-domain components are available while adapting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AdaptSetting {
    Q,
    T,
    TD,
    QT,
    QTD,
}

impl AdaptSetting {
    pub const ALL: [AdaptSetting; 5] = [
        AdaptSetting::Q,
        AdaptSetting::T,
        AdaptSetting::TD,
        AdaptSetting::QT,
        AdaptSetting::QTD,
    ];

    pub fn parse(s: &str) -> Result<AdaptSetting> {
        match s.to_ascii_uppercase().replace('+', "").as_str() {
            "Q" => Ok(AdaptSetting::Q),
            "T" => Ok(AdaptSetting::T),
            "TD" => Ok(AdaptSetting::TD),
            "QT" => Ok(AdaptSetting::QT),
            "QTD" => Ok(AdaptSetting::QTD),
            other => Err(Error::InvalidConfig(format!(
                "unknown setting `{other}` (expected one of Q, T, T+D, Q+T, Q+T+D)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdaptSetting::Q => "Q",
            AdaptSetting::T => "T",
            AdaptSetting::TD => "T+D",
            AdaptSetting::QT => "Q+T",
            AdaptSetting::QTD => "Q+T+D",
        }
    }

    /// Target questions are available (and the question transform trains).
    pub fn has_question(self) -> bool {
        matches!(self, AdaptSetting::Q | AdaptSetting::QT | AdaptSetting::QTD)
    }

    /// Target correct answers are available (and the answer transform trains).
    pub fn has_answer(self) -> bool {
        !matches!(self, AdaptSetting::Q)
    }

    /// Target decoys are available.
    pub fn has_decoys(self) -> bool {
        matches!(self, AdaptSetting::TD | AdaptSetting::QTD)
    }

    /// The discriminative surrogate applies whenever answers exist.
    pub fn uses_surrogate(self) -> bool {
        self.has_answer()
    }

    /// Which partial-information scorer judges transformed features.
    pub fn surrogate_mode(self) -> Option<InputMode> {
        match self {
            AdaptSetting::Q => None,
            AdaptSetting::T | AdaptSetting::TD => Some(InputMode::C),
            AdaptSetting::QT | AdaptSetting::QTD => Some(InputMode::Qc),
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            AdaptSetting::QTD | AdaptSetting::TD => 0.5,
            _ => 0.1,
        }
    }

    pub fn disc_input_dim(self, text_dim: usize) -> usize {
        match self {
            AdaptSetting::Q | AdaptSetting::T | AdaptSetting::TD => text_dim,
            AdaptSetting::QT | AdaptSetting::QTD => 2 * text_dim,
        }
    }
}

impl std::fmt::Display for AdaptSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for AdaptSetting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        AdaptSetting::parse(&s)
    }
}

impl From<AdaptSetting> for String {
    fn from(s: AdaptSetting) -> String {
        s.name().to_string()
    }
}

/// A residual feature transform `x -> x + net(x)` with an MLP body.
/// With the output layer zero-initialized it is exactly the identity, so
/// untrained transforms never perturb features.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTransform {
    pub net: MlpParams,
}

impl ResidualTransform {
    /// Random hidden layer, zero output layer: apply(x) == x exactly.
    pub fn identity_init(io_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut net = MlpParams::new(io_dim, hidden_dim, io_dim, OutputActivation::Identity, seed);
        net.zero_output_layer();
        ResidualTransform { net }
    }

    pub fn io_dim(&self) -> usize {
        self.net.in_dim
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let (net_out, cache) = mlp_forward(&self.net, x)?;
        let mut out = x.clone();
        for (o, &n) in out.data_mut().iter_mut().zip(net_out.data()) {
            *o += n;
        }
        Ok((out, cache))
    }

    /// Backward through `y = x + net(x)`: `dL/dnet_out = upstream`;
    /// returns the net's parameter gradients and `dL/dx = upstream +
    /// input gradient of the net`.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let (grads, net_input_grad) = mlp_backward(&self.net, cache, upstream)?;
        let mut input_grad = upstream.clone();
        for (g, &n) in input_grad.data_mut().iter_mut().zip(net_input_grad.data()) {
            *g += n;
        }
        Ok((grads, input_grad))
    }
}

impl FeatureTransform for ResidualTransform {
    fn apply(&self, x: &FeatureVector) -> FeatureVector {
        let batch = Matrix::from_vec(1, x.len(), x.as_slice().to_vec()).expect("finite input");
        let (out, _) = self.forward_batch(&batch).expect("dimension checked by caller");
        FeatureVector::new(out.row(0).to_vec()).expect("finite output")
    }
}

/// The binary domain classifier: outputs the conditional probability
/// that its input came from the source domain.
#[derive(Debug, Clone)]
pub struct DomainDiscriminator {
    pub net: MlpParams,
}

impl DomainDiscriminator {
    pub fn new(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        DomainDiscriminator {
            net: MlpParams::new(input_dim, hidden_dim, 1, OutputActivation::Sigmoid, seed),
        }
    }

    pub fn probabilities(&self, inputs: &Matrix) -> Result<Matrix> {
        let (out, _) = mlp_forward(&self.net, inputs)?;
        Ok(out)
    }

    /// Fraction of rows classified correctly when `source_inputs` are the
    /// positive class.
    pub fn accuracy(&self, source_inputs: &Matrix, target_inputs: &Matrix) -> Result<f64> {
        let s = self.probabilities(source_inputs)?;
        let t = self.probabilities(target_inputs)?;
        let hits = s.data().iter().filter(|&&p| p > 0.5).count()
            + t.data().iter().filter(|&&p| p <= 0.5).count();
        Ok(hits as f64 / (s.rows() + t.rows()) as f64)
    }
}

/// Builds the discriminator input for one example. Decoys never
/// participate in domain matching, so there is no decoy argument.
pub fn discriminator_input(
    setting: AdaptSetting,
    question: Option<&FeatureVector>,
    answer: Option<&FeatureVector>,
) -> Result<FeatureVector> {
    let need_q = setting.has_question();
    let need_t = setting.has_answer();
    let mut out = Vec::new();
    if need_q {
        let q = question.ok_or_else(|| Error::MissingComponent(format!("question feature in setting {setting}")))?;
        out.extend_from_slice(q.as_slice());
    }
    if need_t {
        let t = answer.ok_or_else(|| Error::MissingComponent(format!("answer feature in setting {setting}")))?;
        out.extend_from_slice(t.as_slice());
    }
    FeatureVector::new(out)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Per-pair discriminative surrogate under a frozen partial-information
/// scorer: `-ln h(...)` for correct candidates, `-ln(1 - h(...))` for
/// incorrect ones, with transforms applied to the target features first.
pub fn surrogate_loss(
    h_sd: &ScorerModel,
    question_transform: &dyn FeatureTransform,
    answer_transform: &dyn FeatureTransform,
    question: Option<&FeatureVector>,
    candidate: &FeatureVector,
    is_correct: bool,
) -> Result<f64> {
    let q = match (h_sd.mode, question) {
        (InputMode::Qc, Some(q)) => Some(question_transform.apply(q)),
        (InputMode::Qc, None) => {
            return Err(Error::ModeMismatch("question+candidate scorer needs a question".into()))
        }
        (InputMode::C, None) => None,
        (InputMode::C, Some(_)) => {
            return Err(Error::ModeMismatch("candidate-only scorer takes no question".into()))
        }
        (InputMode::Iqc, _) => {
            return Err(Error::ModeMismatch("surrogate scorer must be partial-information (QC or C)".into()))
        }
    };
    let c = answer_transform.apply(candidate);
    let h = clamp_prob(crate::scorer::score(h_sd, None, q.as_ref(), &c)?);
    Ok(if is_correct { -h.ln() } else { -(1.0 - h).ln() })
}

/// Sampling weights over source train triplets proportional to
/// `target_freq(question type) / source_freq(question type)`, so the
/// discriminator sees source questions with the target's type mix.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyInput("sampler over empty triplet list".into()));
        }
        let weights = vec![1.0 / len as f64; len];
        let dist = WeightedIndex::new(&weights).expect("uniform weights are valid");
        Ok(WeightedSampler { weights, dist })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        self.dist.sample(rng)
    }
}

/// Builds the type-ratio sampler described above. Question types present
/// in the target but absent from the source get a warning (their mass
/// cannot be represented); if the supports are entirely disjoint the
/// sampler falls back to uniform.
pub fn weighted_source_sampler(source: &VqaDataset, target: &VqaDataset) -> Result<WeightedSampler> {
    if source.train.is_empty() || target.train.is_empty() {
        return Err(Error::EmptyInput("weighted sampler needs nonempty train splits".into()));
    }
    let source_counts = question_type_counts(&source.train);
    let target_counts = question_type_counts(&target.train);
    let (n_source, n_target) = (source.train.len() as f64, target.train.len() as f64);

    let mut ratio = [0.0f64; 7];
    for i in 0..7 {
        let source_freq = source_counts[i] as f64 / n_source;
        let target_freq = target_counts[i] as f64 / n_target;
        if source_freq > 0.0 {
            ratio[i] = target_freq / source_freq;
        } else if target_freq > 0.0 {
            log::warn!(
                "question type `{}` appears in the target but not the source; its mass is dropped",
                crate::features::QuestionType::ALL[i]
            );
        }
    }

    let mut weights: Vec<f64> = source
        .train
        .iter()
        .map(|t| ratio[t.question_type().index()])
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        log::warn!("no shared question types between source and target; sampling uniformly");
        return WeightedSampler::uniform(source.train.len());
    }
    for w in &mut weights {
        *w /= total;
    }
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidConfig(format!("invalid sampling weights: {e}")))?;
    Ok(WeightedSampler { weights, dist })
}

/// Jensen-Shannon divergence estimate from a trained discriminator:
/// `ln 2 + mean ln D(source) / 2 + mean ln(1 - D(target)) / 2`, clipped
/// to [0, ln 2]. Exact only at the optimal discriminator; a diagnostic.
pub fn jsd_estimate(disc: &DomainDiscriminator, source_inputs: &Matrix, target_inputs: &Matrix) -> Result<f64> {
    if source_inputs.rows() == 0 || target_inputs.rows() == 0 {
        return Err(Error::EmptyInput("jsd estimate needs nonempty batches".into()));
    }
    let s = disc.probabilities(source_inputs)?;
    let t = disc.probabilities(target_inputs)?;
    let mean_ln_s: f64 =
        s.data().iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / s.rows() as f64;
    let mean_ln_t: f64 =
        t.data().iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / t.rows() as f64;
    let estimate = std::f64::consts::LN_2 + 0.5 * mean_ln_s + 0.5 * mean_ln_t;
    Ok(estimate.clamp(0.0, std::f64::consts::LN_2))
}

/// Whether the surrogate sums over all of a triplet's decoys or samples
/// a single one per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoyMode {
    #[default]
    All,
    SampleOne,
}

/// Adaptation hyper-parameters. Defaults are the full-scale values;
/// desk-scale runs shrink the loop counts and widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub setting: AdaptSetting,
    /// Weight of the discriminative surrogate; `None` resolves to the
    /// per-setting default (0.5 for T+D and Q+T+D, 0.1 otherwise).
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Outer iterations.
    pub iterations: usize,
    /// Discriminator steps per iteration (k).
    pub disc_steps: usize,
    /// Transform steps per iteration (l).
    pub transform_steps: usize,
    /// Mini-batch size (m).
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub weighted_sampling: bool,
    #[serde(default = "default_transform_hidden")]
    pub transform_hidden: usize,
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
    #[serde(default)]
    pub decoy_mode: DecoyMode,
}

fn default_true() -> bool {
    true
}

fn default_transform_hidden() -> usize {
    128
}

fn default_disc_hidden() -> usize {
    8192
}

impl AdaptConfig {
    pub fn new(setting: AdaptSetting, seed: u64) -> Self {
        AdaptConfig {
            setting,
            lambda: None,
            iterations: 1000,
            disc_steps: 500,
            transform_steps: 5,
            batch_size: 100,
            lr: 1e-4,
            seed,
            weighted_sampling: true,
            transform_hidden: 128,
            disc_hidden: 8192,
            decoy_mode: DecoyMode::All,
        }
    }

    pub fn resolved_lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.setting.default_lambda())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.disc_steps == 0 || self.transform_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "iterations, disc_steps, transform_steps, batch_size must be positive".into(),
            ));
        }
        if self.transform_hidden == 0 || self.disc_hidden == 0 {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if l < 0.0 {
                return Err(Error::InvalidConfig("lambda must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Per-iteration training diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Cross-entropy of the discriminator on its last step this iteration.
    pub disc_loss: f64,
    /// Adversarial component of the transform objective, averaged over
    /// the iteration's transform steps.
    pub transform_loss: f64,
    /// Unweighted surrogate component, averaged likewise; zero when the
    /// surrogate is off (setting Q or lambda = 0).
    pub surrogate_loss: f64,
    /// JSD estimate on fresh batches after discriminator training.
    pub jsd_estimate: f64,
}

/// The product of one adaptation run: both transforms (frozen ones stay
/// exact identities), diagnostics, and the last trained discriminator.
#[derive(Debug, Clone)]
pub struct AdaptationRun {
    pub question_transform: ResidualTransform,
    pub answer_transform: ResidualTransform,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub config: AdaptConfig,
    pub final_discriminator: DomainDiscriminator,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 of seed ^ tag.
    let mut z = seed ^ tag;
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One sampled target mini-batch, transform-ready.
struct TransformBatch {
    questions: Matrix,
    answers: Matrix,
    /// Flattened decoy features; empty unless the setting provides decoys
    /// and the surrogate is active.
    decoys: Matrix,
    /// Row i of `decoys` belongs to triplet `decoy_owner[i]` of the batch.
    decoy_owner: Vec<usize>,
}

fn build_transform_batch(
    triplets: &[&Triplet],
    text_dim: usize,
    with_decoys: bool,
    decoy_mode: DecoyMode,
    rng: &mut ChaCha8Rng,
) -> Result<TransformBatch> {
    let m = triplets.len();
    let mut questions = Vec::with_capacity(m * text_dim);
    let mut answers = Vec::with_capacity(m * text_dim);
    let mut decoys = Vec::new();
    let mut decoy_owner = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        questions.extend_from_slice(t.question_feat.as_slice());
        answers.extend_from_slice(t.correct.feat.as_slice());
        if with_decoys {
            match decoy_mode {
                DecoyMode::All => {
                    for d in &t.decoys {
                        decoys.extend_from_slice(d.feat.as_slice());
                        decoy_owner.push(i);
                    }
                }
                DecoyMode::SampleOne => {
                    let d = &t.decoys[rng.gen_range(0..t.decoys.len())];
                    decoys.extend_from_slice(d.feat.as_slice());
                    decoy_owner.push(i);
                }
            }
        }
    }
    Ok(TransformBatch {
        questions: Matrix::from_vec(m, text_dim, questions)?,
        answers: Matrix::from_vec(m, text_dim, answers)?,
        decoys: Matrix::from_vec(decoy_owner.len(), text_dim, decoys)?,
        decoy_owner,
    })
}

/// Concatenates the per-setting parts into discriminator rows.
fn disc_rows(setting: AdaptSetting, questions: &Matrix, answers: &Matrix) -> Matrix {
    let m = if setting.has_question() { questions.rows() } else { answers.rows() };
    let dim = setting.disc_input_dim(questions.cols().max(answers.cols()));
    let mut data = Vec::with_capacity(m * dim);
    for i in 0..m {
        if setting.has_question() {
            data.extend_from_slice(questions.row(i));
        }
        if setting.has_answer() {
            data.extend_from_slice(answers.row(i));
        }
    }
    Matrix::from_vec(m, dim, data).expect("consistent rows")
}

/// Splits a gradient over discriminator rows back into question/answer
/// parts, matching [`disc_rows`].
fn split_disc_grad(setting: AdaptSetting, grad: &Matrix, text_dim: usize) -> (Option<Matrix>, Option<Matrix>) {
    let m = grad.rows();
    let mut q = setting.has_question().then(|| Matrix::zeros(m, text_dim));
    let mut t = setting.has_answer().then(|| Matrix::zeros(m, text_dim));
    for i in 0..m {
        let row = grad.row(i);
        let mut off = 0;
        if let Some(q) = q.as_mut() {
            q.row_mut(i).copy_from_slice(&row[off..off + text_dim]);
            off += text_dim;
        }
        if let Some(t) = t.as_mut() {
            t.row_mut(i).copy_from_slice(&row[off..off + text_dim]);
        }
    }
    (q, t)
}

struct TransformStepResult {
    adversarial_loss: f64,
    surrogate_loss: f64,
    question_grads: MlpGrads,
    answer_grads: MlpGrads,
}

/// The transform-side objective on one batch and its exact gradients:
///
/// `mean ln(1 - D(z')) + lambda * mean [ l(q', t') + sum_decoys l(q', d') ]`
///
/// where primes are transformed features and `l` is the surrogate. The
/// discriminator and scorer are frozen; gradients flow only into the
/// transforms.
fn transform_step(
    question_transform: &ResidualTransform,
    answer_transform: &ResidualTransform,
    disc: &DomainDiscriminator,
    h_sd: Option<&ScorerModel>,
    lambda: f64,
    setting: AdaptSetting,
    batch: &TransformBatch,
) -> Result<TransformStepResult> {
    let m = batch.questions.rows();
    let text_dim = batch.questions.cols();

    let (q_out, q_cache) = question_transform.forward_batch(&batch.questions)?;
    let (t_out, t_cache) = answer_transform.forward_batch(&batch.answers)?;

    // Adversarial part: mean ln(1 - D(z')).
    let z = disc_rows(setting, &q_out, &t_out);
    let (p, disc_cache) = mlp_forward(&disc.net, &z)?;
    let mut adv_loss = 0.0;
    let mut dp = Matrix::zeros(m, 1);
    for i in 0..m {
        let pi = clamp_prob(p.get(i, 0));
        adv_loss += (1.0 - pi).ln();
        dp.set(i, 0, -1.0 / ((1.0 - pi) * m as f64));
    }
    adv_loss /= m as f64;
    let (_, z_grad) = mlp_backward(&disc.net, &disc_cache, &dp)?;
    let (dq_adv, dt_adv) = split_disc_grad(setting, &z_grad, text_dim);

    let mut dq_total = dq_adv.unwrap_or_else(|| Matrix::zeros(m, text_dim));
    let mut dt_total = dt_adv.unwrap_or_else(|| Matrix::zeros(m, text_dim));

    // Discriminative surrogate part.
    let mut sur_loss = 0.0;
    let mut dd_total = Matrix::zeros(batch.decoys.rows(), text_dim);
    let mut d_cache = None;
    let use_surrogate = lambda > 0.0 && setting.uses_surrogate();
    if use_surrogate {
        let h = h_sd.ok_or_else(|| {
            Error::ModeMismatch(format!("setting {setting} needs a partial-information scorer"))
        })?;
        let with_question = h.mode == InputMode::Qc;

        let h_rows = |cands: &Matrix, owners: Option<&[usize]>| -> Matrix {
            let n = cands.rows();
            let dim = if with_question { 2 * text_dim } else { text_dim };
            let mut data = Vec::with_capacity(n * dim);
            for i in 0..n {
                if with_question {
                    let owner = owners.map_or(i, |o| o[i]);
                    data.extend_from_slice(q_out.row(owner));
                }
                data.extend_from_slice(cands.row(i));
            }
            Matrix::from_vec(n, dim, data).expect("consistent rows")
        };

        // Correct answers: raise ln h.
        let pos_in = h_rows(&t_out, None);
        let (hp, pos_cache) = mlp_forward(&h.net, &pos_in)?;
        let mut dhp = Matrix::zeros(m, 1);
        for i in 0..m {
            let v = clamp_prob(hp.get(i, 0));
            sur_loss += -v.ln();
            dhp.set(i, 0, -1.0 / (v * m as f64));
        }
        let (_, pos_grad) = mlp_backward(&h.net, &pos_cache, &dhp)?;
        for i in 0..m {
            let row = pos_grad.row(i);
            if with_question {
                for (g, &v) in dq_total.row_mut(i).iter_mut().zip(&row[..text_dim]) {
                    *g += lambda * v;
                }
                for (g, &v) in dt_total.row_mut(i).iter_mut().zip(&row[text_dim..]) {
                    *g += lambda * v;
                }
            } else {
                for (g, &v) in dt_total.row_mut(i).iter_mut().zip(row) {
                    *g += lambda * v;
                }
            }
        }

        // Decoys: lower ln h.
        if setting.has_decoys() && batch.decoys.rows() > 0 {
            let (d_out, cache) = answer_transform.forward_batch(&batch.decoys)?;
            let neg_in = h_rows(&d_out, Some(&batch.decoy_owner));
            let (hd, neg_cache) = mlp_forward(&h.net, &neg_in)?;
            let n_d = hd.rows();
            let mut dhd = Matrix::zeros(n_d, 1);
            for i in 0..n_d {
                let v = clamp_prob(hd.get(i, 0));
                sur_loss += -(1.0 - v).ln();
                dhd.set(i, 0, 1.0 / ((1.0 - v) * m as f64));
            }
            let (_, neg_grad) = mlp_backward(&h.net, &neg_cache, &dhd)?;
            for i in 0..n_d {
                let row = neg_grad.row(i);
                if with_question {
                    let owner = batch.decoy_owner[i];
                    for (g, &v) in dq_total.row_mut(owner).iter_mut().zip(&row[..text_dim]) {
                        *g += lambda * v;
                    }
                    for (g, &v) in dd_total.row_mut(i).iter_mut().zip(&row[text_dim..]) {
                        *g += lambda * v;
                    }
                } else {
                    for (g, &v) in dd_total.row_mut(i).iter_mut().zip(row) {
                        *g += lambda * v;
                    }
                }
            }
            d_cache = Some(cache);
        }
        sur_loss /= m as f64;
    }

    // Through the transforms. Frozen transforms still produce gradients
    // here; the caller simply never applies them.
    let (question_grads, _) = question_transform.backward_batch(&q_cache, &dq_total)?;
    let (mut answer_grads, _) = answer_transform.backward_batch(&t_cache, &dt_total)?;
    if let Some(cache) = &d_cache {
        let (decoy_grads, _) = answer_transform.backward_batch(cache, &dd_total)?;
        answer_grads.add(&decoy_grads);
    }

    Ok(TransformStepResult {
        adversarial_loss: adv_loss,
        surrogate_loss: sur_loss,
        question_grads,
        answer_grads,
    })
}

/// Runs the full min-max adaptation loop. Per outer iteration the
/// discriminator is reinitialized and trained for `disc_steps` on fresh
/// mini-batches (source drawn through the weighted sampler), then the
/// transforms take `transform_steps` descent steps on the combined
/// objective. The frozen full scorer `m_sd` is only validated here; it is
/// consumed at inference time.
pub fn train_adaptation(
    source: &VqaDataset,
    target: &VqaDataset,
    m_sd: &ScorerModel,
    h_sd: Option<&ScorerModel>,
    cfg: &AdaptConfig,
) -> Result<AdaptationRun> {
    cfg.validate()?;
    let setting = cfg.setting;
    if source.train.is_empty() || target.train.is_empty() {
        return Err(Error::EmptyInput("adaptation needs nonempty train splits".into()));
    }
    let text_dim = source
        .text_dim()
        .ok_or_else(|| Error::EmptyInput("source dataset".into()))?;
    if target.text_dim() != Some(text_dim) {
        return Err(Error::dim("target text features", text_dim, target.text_dim().unwrap_or(0)));
    }
    if m_sd.mode != InputMode::Iqc || m_sd.text_dim != text_dim {
        return Err(Error::ModeMismatch("inference scorer must be IQC with matching text dim".into()));
    }
    match (setting.surrogate_mode(), h_sd) {
        (None, Some(_)) => {
            return Err(Error::ModeMismatch("setting Q takes no partial-information scorer".into()))
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::ModeMismatch(format!(
                "setting {setting} needs a partial-information scorer"
            )))
        }
        (Some(expected), Some(h)) => {
            if h.mode != expected || h.text_dim != text_dim {
                return Err(Error::ModeMismatch(format!(
                    "setting {setting} needs a {expected} scorer with text dim {text_dim}"
                )));
            }
        }
    }

    let lambda = cfg.resolved_lambda();
    let mut question_transform =
        ResidualTransform::identity_init(text_dim, cfg.transform_hidden, derive_seed(cfg.seed, 0x71));
    let mut answer_transform =
        ResidualTransform::identity_init(text_dim, cfg.transform_hidden, derive_seed(cfg.seed, 0xa5));
    let mut adam_q = AdamState::new(&question_transform.net, cfg.lr);
    let mut adam_a = AdamState::new(&answer_transform.net, cfg.lr);

    let sampler = if cfg.weighted_sampling {
        weighted_source_sampler(source, target)?
    } else {
        WeightedSampler::uniform(source.train.len())?
    };

    let mut source_rng = stream_rng(cfg.seed, 10);
    let mut disc_target_rng = stream_rng(cfg.seed, 11);
    let mut step_rng = stream_rng(cfg.seed, 12);
    let mut eval_rng = stream_rng(cfg.seed, 13);

    let m = cfg.batch_size;
    let disc_dim = setting.disc_input_dim(text_dim);

    // Raw (untransformed) rows for one sampled batch.
    let source_batch = |rng: &mut ChaCha8Rng, sampler: &WeightedSampler| -> Matrix {
        let mut data = Vec::with_capacity(m * disc_dim);
        for _ in 0..m {
            let t = &source.train[sampler.sample(rng)];
            if setting.has_question() {
                data.extend_from_slice(t.question_feat.as_slice());
            }
            if setting.has_answer() {
                data.extend_from_slice(t.correct.feat.as_slice());
            }
        }
        Matrix::from_vec(m, disc_dim, data).expect("consistent dims")
    };
    let target_triplets = |rng: &mut ChaCha8Rng| -> Vec<&Triplet> {
        (0..m).map(|_| &target.train[rng.gen_range(0..target.train.len())]).collect()
    };

    let mut diagnostics = Vec::with_capacity(cfg.iterations);
    let mut final_disc: Option<DomainDiscriminator> = None;

    for iteration in 0..cfg.iterations {
        // Fresh discriminator each outer iteration.
        let mut disc = DomainDiscriminator::new(
            disc_dim,
            cfg.disc_hidden,
            derive_seed(cfg.seed, 0xd15c ^ ((iteration as u64) << 1)),
        );
        let mut adam_disc = AdamState::new(&disc.net, cfg.lr);
        let mut disc_loss = f64::NAN;

        for _ in 0..cfg.disc_steps {
            let src = source_batch(&mut source_rng, &sampler);
            let tgt = build_transform_batch(
                &target_triplets(&mut disc_target_rng),
                text_dim,
                false,
                cfg.decoy_mode,
                &mut disc_target_rng,
            )?;
            let (q_out, _) = question_transform.forward_batch(&tgt.questions)?;
            let (t_out, _) = answer_transform.forward_batch(&tgt.answers)?;
            let tgt_rows = disc_rows(setting, &q_out, &t_out);

            // Single stacked batch, labels 1 for source rows and 0 for
            // transformed target rows; minimizing this cross-entropy
            // ascends the discriminator's objective.
            let mut data = Vec::with_capacity(2 * m * disc_dim);
            data.extend_from_slice(src.data());
            data.extend_from_slice(tgt_rows.data());
            let x = Matrix::from_vec(2 * m, disc_dim, data)?;
            let mut labels = vec![1.0; m];
            labels.extend(std::iter::repeat(0.0).take(m));
            let y = Matrix::from_vec(2 * m, 1, labels)?;

            let (out, cache) = mlp_forward(&disc.net, &x)?;
            let (loss, grad) = bce_loss(&out, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "discriminator training".into(),
                    iteration,
                });
            }
            let (grads, _) = mlp_backward(&disc.net, &cache, &grad)?;
            adam_disc.step(&mut disc.net, &grads);
            disc_loss = loss;
        }

        // Diagnostic JSD estimate on fresh batches.
        let src_eval = source_batch(&mut eval_rng, &sampler);
        let tgt_eval = build_transform_batch(
            &target_triplets(&mut eval_rng),
            text_dim,
            false,
            cfg.decoy_mode,
            &mut eval_rng,
        )?;
        let (q_eval, _) = question_transform.forward_batch(&tgt_eval.questions)?;
        let (t_eval, _) = answer_transform.forward_batch(&tgt_eval.answers)?;
        let jsd = jsd_estimate(&disc, &src_eval, &disc_rows(setting, &q_eval, &t_eval))?;

        let mut adv_sum = 0.0;
        let mut sur_sum = 0.0;
        let with_decoys = setting.has_decoys() && lambda > 0.0;
        for _ in 0..cfg.transform_steps {
            let batch = build_transform_batch(
                &target_triplets(&mut step_rng),
                text_dim,
                with_decoys,
                cfg.decoy_mode,
                &mut step_rng,
            )?;
            let h_for_step = if lambda > 0.0 { h_sd } else { None };
            let result = transform_step(
                &question_transform,
                &answer_transform,
                &disc,
                h_for_step,
                lambda,
                setting,
                &batch,
            )?;
            if !result.adversarial_loss.is_finite() || !result.surrogate_loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "transform training".into(),
                    iteration,
                });
            }
            if setting.has_question() {
                adam_q.step(&mut question_transform.net, &result.question_grads);
            }
            if setting.has_answer() {
                adam_a.step(&mut answer_transform.net, &result.answer_grads);
            }
            adv_sum += result.adversarial_loss;
            sur_sum += result.surrogate_loss;
        }

        diagnostics.push(IterationDiagnostics {
            iteration,
            disc_loss,
            transform_loss: adv_sum / cfg.transform_steps as f64,
            surrogate_loss: sur_sum / cfg.transform_steps as f64,
            jsd_estimate: jsd,
        });
        if iteration + 1 == cfg.iterations {
            final_disc = Some(disc);
        }
    }

    Ok(AdaptationRun {
        question_transform,
        answer_transform,
        diagnostics,
        config: cfg.clone(),
        final_discriminator: final_disc.expect("iterations is positive"),
    })
}

/// Trains a fresh discriminator of the same class and budget the
/// adaptation fights (same k, learning rate, width, and batch size) on
/// source-vs-(transformed) target train data, then reports its accuracy
/// on the val splits. This is the two-sample measure behind "the
/// discriminator can no longer tell the domains apart": 0.5 means
/// matched, values near 1 mean separable.
pub fn adversary_accuracy(
    source: &VqaDataset,
    target: &VqaDataset,
    question_transform: Option<&ResidualTransform>,
    answer_transform: Option<&ResidualTransform>,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<f64> {
    let setting = cfg.setting;
    let text_dim = source
        .text_dim()
        .ok_or_else(|| Error::EmptyInput("source dataset".into()))?;
    if source.val.is_empty() || target.val.is_empty() {
        return Err(Error::EmptyInput("adversary accuracy needs val splits".into()));
    }
    let disc_dim = setting.disc_input_dim(text_dim);
    let m = cfg.batch_size;

    let sampler = if cfg.weighted_sampling {
        weighted_source_sampler(source, target)?
    } else {
        WeightedSampler::uniform(source.train.len())?
    };
    let mut rng = stream_rng(seed, 20);

    let transformed_rows = |triplets: &[Triplet], indices: &[usize]| -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * disc_dim);
        for &i in indices {
            let t = &triplets[i];
            if setting.has_question() {
                let q = match question_transform {
                    Some(g) => g.apply(&t.question_feat),
                    None => t.question_feat.clone(),
                };
                data.extend_from_slice(q.as_slice());
            }
            if setting.has_answer() {
                let a = match answer_transform {
                    Some(g) => g.apply(&t.correct.feat),
                    None => t.correct.feat.clone(),
                };
                data.extend_from_slice(a.as_slice());
            }
        }
        Matrix::from_vec(indices.len(), disc_dim, data)
    };
    let raw_rows = |triplets: &[Triplet], indices: &[usize]| -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * disc_dim);
        for &i in indices {
            let t = &triplets[i];
            if setting.has_question() {
                data.extend_from_slice(t.question_feat.as_slice());
            }
            if setting.has_answer() {
                data.extend_from_slice(t.correct.feat.as_slice());
            }
        }
        Matrix::from_vec(indices.len(), disc_dim, data)
    };

    let mut disc = DomainDiscriminator::new(disc_dim, cfg.disc_hidden, derive_seed(seed, 0xe5a1));
    let mut adam = AdamState::new(&disc.net, cfg.lr);
    for _ in 0..cfg.disc_steps {
        let src_idx: Vec<usize> = (0..m).map(|_| sampler.sample(&mut rng)).collect();
        let tgt_idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..target.train.len())).collect();
        let src = raw_rows(&source.train, &src_idx)?;
        let tgt = transformed_rows(&target.train, &tgt_idx)?;
        let mut data = Vec::with_capacity(2 * m * disc_dim);
        data.extend_from_slice(src.data());
        data.extend_from_slice(tgt.data());
        let x = Matrix::from_vec(2 * m, disc_dim, data)?;
        let mut labels = vec![1.0; m];
        labels.extend(std::iter::repeat(0.0).take(m));
        let y = Matrix::from_vec(2 * m, 1, labels)?;
        let (out, cache) = mlp_forward(&disc.net, &x)?;
        let (_, grad) = bce_loss(&out, &y)?;
        let (grads, _) = mlp_backward(&disc.net, &cache, &grad)?;
        adam.step(&mut disc.net, &grads);
    }

    let src_val_idx: Vec<usize> = (0..source.val.len()).collect();
    let tgt_val_idx: Vec<usize> = (0..target.val.len()).collect();
    let src_val = raw_rows(&source.val, &src_val_idx)?;
    let tgt_val = transformed_rows(&target.val, &tgt_val_idx)?;
    disc.accuracy(&src_val, &tgt_val)
}

/// Serializes per-iteration diagnostics as CSV.
pub fn diagnostics_csv(diags: &[IterationDiagnostics]) -> String {
    let mut out = String::from("iteration,disc_loss,transform_loss,surrogate_loss,jsd_estimate\n");
    for d in diags {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            d.iteration, d.disc_loss, d.transform_loss, d.surrogate_loss, d.jsd_estimate
        ));
    }
    out
}

/// Saves both transforms with run metadata in the checkpoint container.
pub fn save_transforms(run: &AdaptationRun, path: impl AsRef<std::path::Path>) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "transforms",
        "setting": run.config.setting.name(),
        "lambda": run.config.resolved_lambda(),
        "seed": run.config.seed,
        "text_dim": run.question_transform.io_dim(),
    });
    save_checkpoint(
        path,
        &meta,
        &[
            ("question_transform", &run.question_transform.net),
            ("answer_transform", &run.answer_transform.net),
        ],
    )
}

/// Loads a transforms checkpoint saved by [`save_transforms`].
pub fn load_transforms(path: impl AsRef<std::path::Path>) -> Result<(ResidualTransform, ResidualTransform)> {
    let path = path.as_ref();
    let ckpt = load_checkpoint(path)?;
    let kind = ckpt.meta.get("kind").and_then(|v| v.as_str()).unwrap_or_default();
    if kind != "transforms" {
        return Err(Error::format(path, None, format!("checkpoint kind `{kind}` is not transforms")));
    }
    let get = |name: &str| -> Result<ResidualTransform> {
        let net = ckpt
            .block(name)
            .ok_or_else(|| Error::format(path, None, format!("missing block `{name}`")))?
            .clone();
        if net.in_dim != net.out_dim {
            return Err(Error::format(path, None, format!("block `{name}` is not square")));
        }
        Ok(ResidualTransform { net })
    };
    Ok((get("question_transform")?, get("answer_transform")?))
}
