//! Synthetic biased-dataset generator: a pair of datasets drawn from one
//! concept-based generative law, where the target domain's question and
//! answer features are pushed through known shifts. The inverse shift is
//! therefore an oracle transform, which makes adaptation claims
//! falsifiable at desk scale.

use std::sync::Arc;

use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Answer, Triplet, VqaDataset};
use crate::error::{Error, Result};
use crate::features::{AffineMap, FeatureVector, ImageFeatureStore, QuestionType};
use crate::nn::Matrix;

/// How a domain shift is specified in a [`SyntheticBiasSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShiftSpec {
    /// Explicit affine map: square `matrix` (dim x dim) plus `offset`.
    Explicit { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// Random rotation by `angle` radians in seeded planes, scaled by
    /// `scale`, then translated by a seeded direction of norm `offset_norm`.
    Random {
        angle: f64,
        scale: f64,
        offset_norm: f64,
    },
}

impl ShiftSpec {
    fn to_affine(&self, dim: usize, rng: &mut ChaCha8Rng) -> Result<AffineMap> {
        match self {
            ShiftSpec::Explicit { matrix, offset } => {
                let rows: Vec<&[f64]> = matrix.iter().map(|r| r.as_slice()).collect();
                let m = Matrix::from_rows(&rows)?;
                if m.rows() != dim {
                    return Err(Error::dim("shift matrix", dim, m.rows()));
                }
                AffineMap::new(m, offset.clone())
            }
            ShiftSpec::Random {
                angle,
                scale,
                offset_norm,
            } => Ok(random_rotation_shift(dim, *angle, *scale, *offset_norm, rng)),
        }
    }
}

/// Rotation composed from Givens rotations in `dim / 2` seeded planes,
/// scaled and translated.
fn random_rotation_shift(dim: usize, angle: f64, scale: f64, offset_norm: f64, rng: &mut ChaCha8Rng) -> AffineMap {
    let mut m = Matrix::zeros(dim, dim);
    for i in 0..dim {
        m.set(i, i, 1.0);
    }
    let mut axes: Vec<usize> = (0..dim).collect();
    use rand::seq::SliceRandom;
    axes.shuffle(rng);
    let (sin, cos) = angle.sin_cos();
    for pair in axes.chunks_exact(2) {
        let (i, j) = (pair[0], pair[1]);
        // Right-multiply by the Givens rotation in plane (i, j).
        for row in 0..dim {
            let a = m.get(row, i);
            let b = m.get(row, j);
            m.set(row, i, a * cos - b * sin);
            m.set(row, j, a * sin + b * cos);
        }
    }
    m.scale(scale);
    let mut offset: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut offset {
        *v *= offset_norm / norm;
    }
    AffineMap::new(m, offset).expect("square by construction")
}

/// Specification of a synthetic source/target pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticBiasSpec {
    #[serde(default = "default_source_name")]
    pub source_name: String,
    #[serde(default = "default_target_name")]
    pub target_name: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Decoys per triplet (K).
    pub decoys: usize,
    pub concept_count: usize,
    /// Target-domain question shift; identity when absent.
    #[serde(default)]
    pub question_shift: Option<ShiftSpec>,
    /// Target-domain answer shift, applied to every candidate answer.
    #[serde(default)]
    pub answer_shift: Option<ShiftSpec>,
    /// Optional coordinate-wise squashing gain `g` applied after the
    /// question shift: `x -> g tanh(x / g)`. Makes the shift non-affine.
    #[serde(default)]
    pub question_squash: Option<f64>,
    #[serde(default)]
    pub answer_squash: Option<f64>,
    /// Probabilities over the 6W + other question types, in
    /// [`QuestionType::ALL`] order. Must sum to 1.
    pub type_distribution: [f64; 7],
    /// Target-domain type distribution; defaults to the source one.
    #[serde(default)]
    pub target_type_distribution: Option<[f64; 7]>,
    /// Std-dev of the Gaussian noise added to every generated feature.
    pub phrasing_noise: f64,
    pub seed: u64,
}

fn default_source_name() -> String {
    "synth-source".into()
}

fn default_target_name() -> String {
    "synth-target".into()
}

impl SyntheticBiasSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::InvalidConfig("n_train must be positive".into()));
        }
        if self.text_dim == 0 || self.image_dim == 0 {
            return Err(Error::InvalidConfig("feature dimensions must be positive".into()));
        }
        if self.decoys == 0 {
            return Err(Error::InvalidConfig("decoys must be >= 1".into()));
        }
        if self.concept_count <= self.decoys {
            return Err(Error::InvalidConfig(format!(
                "concept_count ({}) must exceed decoys ({}) so decoys come from other concepts",
                self.concept_count, self.decoys
            )));
        }
        for dist in std::iter::once(&self.type_distribution).chain(self.target_type_distribution.as_ref()) {
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || dist.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidConfig("type distribution must be non-negative and sum to 1".into()));
            }
        }
        if self.phrasing_noise < 0.0 {
            return Err(Error::InvalidConfig("phrasing_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// A generated pair along with the realized shifts, whose inverses are
/// oracle transforms for the benchmark.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: VqaDataset,
    pub target: VqaDataset,
    pub question_shift: AffineMap,
    pub answer_shift: AffineMap,
    pub question_squash: Option<f64>,
    pub answer_squash: Option<f64>,
}

impl SyntheticPair {
    /// Inverse of the question shift, valid as an oracle only when no
    /// squashing was applied.
    pub fn oracle_question_transform(&self) -> Result<AffineMap> {
        if self.question_squash.is_some() {
            return Err(Error::InvalidConfig("question shift is squashed; no affine oracle exists".into()));
        }
        self.question_shift.inverse()
    }

    pub fn oracle_answer_transform(&self) -> Result<AffineMap> {
        if self.answer_squash.is_some() {
            return Err(Error::InvalidConfig("answer shift is squashed; no affine oracle exists".into()));
        }
        self.answer_shift.inverse()
    }
}

struct Concepts {
    question: Vec<Vec<f64>>,
    answer: Vec<Vec<f64>>,
    image: Vec<Vec<f64>>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn sample_categorical(probs: &[f64; 7], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Quantize through f32 so in-memory features round-trip the binary
/// feature format exactly.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn squash(values: &mut [f64], gain: f64) {
    for v in values.iter_mut() {
        *v = gain * (*v / gain).tanh();
    }
}

fn question_text(qtype: QuestionType, concept: usize) -> String {
    match qtype {
        QuestionType::What => format!("what is beside thing{concept}"),
        QuestionType::Where => format!("where is thing{concept}"),
        QuestionType::How => format!("how does thing{concept} look"),
        QuestionType::When => format!("when was thing{concept} seen"),
        QuestionType::Why => format!("why is thing{concept} here"),
        QuestionType::Who => format!("who holds thing{concept}"),
        QuestionType::Other => format!("is thing{concept} visible"),
    }
}

/// Draws latent concepts and generates a source/target dataset pair with
/// a known shift between them. Deterministic given the spec.
pub fn generate_synthetic_pair(spec: &SyntheticBiasSpec) -> Result<SyntheticPair> {
    spec.validate()?;

    let mut concept_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    concept_rng.set_stream(0);
    let concepts = Concepts {
        question: (0..spec.concept_count).map(|_| unit_vector(spec.text_dim, &mut concept_rng)).collect(),
        answer: (0..spec.concept_count).map(|_| unit_vector(spec.text_dim, &mut concept_rng)).collect(),
        image: (0..spec.concept_count).map(|_| unit_vector(spec.image_dim, &mut concept_rng)).collect(),
    };

    let mut shift_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shift_rng.set_stream(1);
    let question_shift = match &spec.question_shift {
        Some(s) => s.to_affine(spec.text_dim, &mut shift_rng)?,
        None => AffineMap::identity(spec.text_dim),
    };
    let answer_shift = match &spec.answer_shift {
        Some(s) => s.to_affine(spec.text_dim, &mut shift_rng)?,
        None => AffineMap::identity(spec.text_dim),
    };

    let source = generate_domain(spec, &concepts, &spec.source_name, None, None, 2)?;
    let target = generate_domain(
        spec,
        &concepts,
        &spec.target_name,
        Some((&question_shift, spec.question_squash)),
        Some((&answer_shift, spec.answer_squash)),
        3,
    )?;

    Ok(SyntheticPair {
        source,
        target,
        question_shift,
        answer_shift,
        question_squash: spec.question_squash,
        answer_squash: spec.answer_squash,
    })
}

fn generate_domain(
    spec: &SyntheticBiasSpec,
    concepts: &Concepts,
    name: &str,
    question_shift: Option<(&AffineMap, Option<f64>)>,
    answer_shift: Option<(&AffineMap, Option<f64>)>,
    stream: u64,
) -> Result<VqaDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    let type_dist = if question_shift.is_some() {
        spec.target_type_distribution.as_ref().unwrap_or(&spec.type_distribution)
    } else {
        &spec.type_distribution
    };

    let mut store = ImageFeatureStore::new(spec.image_dim)?;
    let mut dataset = VqaDataset {
        name: name.to_string(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        image_store: Arc::new(ImageFeatureStore::new(spec.image_dim)?),
    };

    let noise = spec.phrasing_noise;
    let mut image_id = 0u64;
    for (split_name, count) in [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)] {
        let mut triplets = Vec::with_capacity(count);
        for i in 0..count {
            let concept = rng.gen_range(0..spec.concept_count);
            let qtype = QuestionType::ALL[sample_categorical(type_dist, &mut rng)];

            let image_feat: Vec<f64> = concepts.image[concept]
                .iter()
                .map(|&c| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    q32(c + noise * g)
                })
                .collect();
            store.insert(image_id, FeatureVector::new(image_feat)?)?;

            let mut question_feat: Vec<f64> = concepts.question[concept]
                .iter()
                .map(|&c| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    c + noise * g
                })
                .collect();
            if let Some((shift, squash_gain)) = question_shift {
                question_feat = shift.apply_slice(&question_feat);
                if let Some(g) = squash_gain {
                    squash(&mut question_feat, g);
                }
            }
            for v in &mut question_feat {
                *v = q32(*v);
            }

            let answer_feat_for = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
                let mut feat: Vec<f64> = concepts.answer[c]
                    .iter()
                    .map(|&v| {
                        let g: f64 = StandardNormal.sample(rng);
                        v + noise * g
                    })
                    .collect();
                if let Some((shift, squash_gain)) = answer_shift {
                    feat = shift.apply_slice(&feat);
                    if let Some(g) = squash_gain {
                        squash(&mut feat, g);
                    }
                }
                for v in &mut feat {
                    *v = q32(*v);
                }
                feat
            };

            let correct = Answer {
                text: format!("entity{concept}"),
                feat: FeatureVector::new(answer_feat_for(concept, &mut rng))?,
            };

            // Decoys come from distinct other concepts.
            let mut decoy_concepts = Vec::with_capacity(spec.decoys);
            while decoy_concepts.len() < spec.decoys {
                let c = rng.gen_range(0..spec.concept_count);
                if c != concept && !decoy_concepts.contains(&c) {
                    decoy_concepts.push(c);
                }
            }
            let decoys: Vec<Answer> = decoy_concepts
                .into_iter()
                .map(|c| {
                    Ok(Answer {
                        text: format!("entity{c}"),
                        feat: FeatureVector::new(answer_feat_for(c, &mut rng))?,
                    })
                })
                .collect::<Result<_>>()?;

            triplets.push(Triplet {
                id: format!("{name}-{split_name}-{i}"),
                image_id,
                question: question_text(qtype, concept),
                question_feat: FeatureVector::new(question_feat)?,
                correct,
                decoys,
                gt_answers: None,
            });
            image_id += 1;
        }
        match split_name {
            "train" => dataset.train = triplets,
            "val" => dataset.val = triplets,
            _ => dataset.test = triplets,
        }
    }

    dataset.image_store = Arc::new(store);
    dataset.validate()?;
    Ok(dataset)
}
