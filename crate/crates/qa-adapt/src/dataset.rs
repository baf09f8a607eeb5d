//! The dataset model: image-question-answers triplets with decoys, split
//! into train/val/test, plus ingestion, filtering, and sub-sampling.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    embed_text, fnv64, load_image_features, question_type, save_image_features, tokenize,
    EmbeddingTable, FeatureVector, ImageFeatureStore, QuestionType,
};

/// A candidate answer: surface text plus its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub text: String,
    pub feat: FeatureVector,
}

/// One image-question-answers record. The candidate set is the correct
/// answer followed by `K >= 1` decoys.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub image_id: u64,
    pub question: String,
    pub question_feat: FeatureVector,
    pub correct: Answer,
    pub decoys: Vec<Answer>,
    /// Ten human annotations, when the source dataset provides them.
    pub gt_answers: Option<Vec<String>>,
}

impl Triplet {
    pub fn question_type(&self) -> QuestionType {
        question_type(&self.question)
    }

    pub fn decoy_count(&self) -> usize {
        self.decoys.len()
    }

    /// Candidate features in canonical order: correct first, then decoys.
    pub fn candidate_feats(&self) -> Vec<&FeatureVector> {
        std::iter::once(&self.correct.feat)
            .chain(self.decoys.iter().map(|d| &d.feat))
            .collect()
    }

    /// Candidate texts in canonical order.
    pub fn candidate_texts(&self) -> Vec<&str> {
        std::iter::once(self.correct.text.as_str())
            .chain(self.decoys.iter().map(|d| d.text.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Split::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A named dataset: triplets per split plus the image-feature store they
/// reference. Immutable after construction.
#[derive(Debug, Clone)]
pub struct VqaDataset {
    pub name: String,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub image_store: Arc<ImageFeatureStore>,
}

impl VqaDataset {
    pub fn split(&self, split: Split) -> &[Triplet] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text feature dimension, from the first triplet.
    pub fn text_dim(&self) -> Option<usize> {
        self.all_triplets().next().map(|t| t.question_feat.len())
    }

    pub fn image_dim(&self) -> usize {
        self.image_store.dim()
    }

    /// Image feature for a triplet; the id was validated at construction.
    pub fn image_feat(&self, triplet: &Triplet) -> FeatureVector {
        self.image_store
            .get(triplet.image_id)
            .expect("validated image id")
    }

    /// Checks the dataset invariants: at least one decoy everywhere, split
    /// ids disjoint, image ids resolvable, text dims consistent, decoy
    /// texts distinct from the correct answer.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let text_dim = self.text_dim().unwrap_or(0);
        for t in self.all_triplets() {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: t.id.clone(),
                    msg: "duplicate id across splits".into(),
                });
            }
            if t.decoys.is_empty() {
                return Err(Error::InvalidRecord {
                    id: t.id.clone(),
                    msg: "triplet has no decoys".into(),
                });
            }
            if !self.image_store.contains(t.image_id) {
                return Err(Error::InvalidRecord {
                    id: t.id.clone(),
                    msg: format!("image id {} not in feature store", t.image_id),
                });
            }
            if t.question_feat.len() != text_dim || t.correct.feat.len() != text_dim {
                return Err(Error::InvalidRecord {
                    id: t.id.clone(),
                    msg: "inconsistent text feature dimension".into(),
                });
            }
            for d in &t.decoys {
                if d.feat.len() != text_dim {
                    return Err(Error::InvalidRecord {
                        id: t.id.clone(),
                        msg: "inconsistent decoy feature dimension".into(),
                    });
                }
                if d.text == t.correct.text {
                    return Err(Error::InvalidRecord {
                        id: t.id.clone(),
                        msg: "decoy text equals the correct answer".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    image_id: u64,
    question: String,
    answer: String,
    decoys: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt_answers: Option<Vec<String>>,
    split: String,
}

/// Where text features come from when loading a JSONL dataset.
pub enum TextFeatureSource<'a> {
    /// Compute features with [`embed_text`] over this table.
    Embeddings(&'a EmbeddingTable),
    /// Precomputed features in a binary sidecar store, keyed by
    /// [`text_feature_key`].
    Sidecar(&'a ImageFeatureStore),
}

/// Sidecar key for a record's text features: FNV-1a of `"{id}/{role}"`,
/// where role is `q`, `a`, or `d{index}`.
pub fn text_feature_key(record_id: &str, role: &str) -> u64 {
    fnv64(format!("{record_id}/{role}").as_bytes())
}

/// Loads a JSONL dataset. Each line is one record:
/// `{"id", "image_id", "question", "answer", "decoys", "gt_answers"?, "split"}`.
pub fn load_dataset(
    jsonl_path: impl AsRef<Path>,
    name: &str,
    image_store: Arc<ImageFeatureStore>,
    text_source: &TextFeatureSource<'_>,
) -> Result<VqaDataset> {
    let path = jsonl_path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut dataset = VqaDataset {
        name: name.to_string(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        image_store,
    };

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, Some(line_no), format!("invalid json: {e}")))?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing id>")
            .to_string();
        let record: JsonRecord = serde_json::from_value(value).map_err(|e| Error::InvalidRecord {
            id: id.clone(),
            msg: e.to_string(),
        })?;
        if record.decoys.is_empty() {
            return Err(Error::InvalidRecord {
                id,
                msg: "record has no decoys".into(),
            });
        }

        let feat_for = |role: &str, text: &str| -> Result<FeatureVector> {
            match text_source {
                TextFeatureSource::Embeddings(table) => Ok(embed_text(table, text)),
                TextFeatureSource::Sidecar(store) => store
                    .get(text_feature_key(&record.id, role))
                    .ok_or_else(|| Error::InvalidRecord {
                        id: record.id.clone(),
                        msg: format!("sidecar is missing text features for role `{role}`"),
                    }),
            }
        };

        let question_feat = feat_for("q", &record.question)?;
        let correct = Answer {
            feat: feat_for("a", &record.answer)?,
            text: record.answer,
        };
        let mut decoys = Vec::with_capacity(record.decoys.len());
        for (k, text) in record.decoys.into_iter().enumerate() {
            decoys.push(Answer {
                feat: feat_for(&format!("d{k}"), &text)?,
                text,
            });
        }

        let split = Split::parse(&record.split).map_err(|_| Error::InvalidRecord {
            id: record.id.clone(),
            msg: format!("unknown split `{}`", record.split),
        })?;
        let triplet = Triplet {
            id: record.id,
            image_id: record.image_id,
            question: record.question,
            question_feat,
            correct,
            decoys,
            gt_answers: record.gt_answers,
        };
        match split {
            Split::Train => dataset.train.push(triplet),
            Split::Val => dataset.val.push(triplet),
            Split::Test => dataset.test.push(triplet),
        }
    }

    dataset.validate()?;
    Ok(dataset)
}

/// Writes the JSONL records in split order (train, val, test).
pub fn save_dataset_jsonl(dataset: &VqaDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for split in Split::ALL {
        for t in dataset.split(split) {
            let record = JsonRecord {
                id: t.id.clone(),
                image_id: t.image_id,
                question: t.question.clone(),
                answer: t.correct.text.clone(),
                decoys: t.decoys.iter().map(|d| d.text.clone()).collect(),
                gt_answers: t.gt_answers.clone(),
                split: split.name().to_string(),
            };
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Builds the text-feature sidecar store for a dataset.
pub fn build_text_sidecar(dataset: &VqaDataset) -> Result<ImageFeatureStore> {
    let dim = dataset
        .text_dim()
        .ok_or_else(|| Error::EmptyInput("dataset has no triplets".into()))?;
    let mut store = ImageFeatureStore::new(dim)?;
    for t in dataset.all_triplets() {
        store.insert(text_feature_key(&t.id, "q"), t.question_feat.clone())?;
        store.insert(text_feature_key(&t.id, "a"), t.correct.feat.clone())?;
        for (k, d) in t.decoys.iter().enumerate() {
            store.insert(text_feature_key(&t.id, &format!("d{k}")), d.feat.clone())?;
        }
    }
    Ok(store)
}

/// Conventional on-disk dataset layout: `triplets.jsonl` + `images.qafv`
/// + `text.qafv` inside one directory.
pub fn save_dataset_dir(dataset: &VqaDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_dataset_jsonl(dataset, dir.join("triplets.jsonl"))?;
    save_image_features(&dataset.image_store, dir.join("images.qafv"))?;
    let sidecar = build_text_sidecar(dataset)?;
    save_image_features(&sidecar, dir.join("text.qafv"))
}

/// Loads a dataset saved by [`save_dataset_dir`]. Falls back to an
/// `embeddings.txt` word-vector table when `text.qafv` is absent.
pub fn load_dataset_dir(dir: impl AsRef<Path>, name: &str) -> Result<VqaDataset> {
    let dir = dir.as_ref();
    let image_store = Arc::new(load_image_features(dir.join("images.qafv"))?);
    let sidecar_path = dir.join("text.qafv");
    if sidecar_path.exists() {
        let sidecar = load_image_features(&sidecar_path)?;
        load_dataset(
            dir.join("triplets.jsonl"),
            name,
            image_store,
            &TextFeatureSource::Sidecar(&sidecar),
        )
    } else {
        let table = crate::features::load_embedding_table(dir.join("embeddings.txt"))?;
        load_dataset(
            dir.join("triplets.jsonl"),
            name,
            image_store,
            &TextFeatureSource::Embeddings(&table),
        )
    }
}

fn normalized_answer(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Drops triplets whose correct answer, normalized, is "yes" or "no".
pub fn filter_yes_no(dataset: &VqaDataset) -> VqaDataset {
    let keep = |t: &&Triplet| {
        let norm = normalized_answer(&t.correct.text);
        norm != "yes" && norm != "no"
    };
    VqaDataset {
        name: dataset.name.clone(),
        train: dataset.train.iter().filter(keep).cloned().collect(),
        val: dataset.val.iter().filter(keep).cloned().collect(),
        test: dataset.test.iter().filter(keep).cloned().collect(),
        image_store: Arc::clone(&dataset.image_store),
    }
}

/// Uniformly sub-samples the train split without replacement, keeping
/// val/test untouched. Selection order follows the original split order.
pub fn subsample(dataset: &VqaDataset, fraction: f64, seed: u64) -> Result<VqaDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = dataset.train.len();
    let count = ((fraction * n as f64).floor() as usize).min(n);
    if count == 0 {
        return Err(Error::InsufficientData(format!(
            "fraction {fraction} of {n} train triplets leaves none"
        )));
    }
    let train = if count == n {
        dataset.train.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let mut chosen: Vec<usize> = indices.into_iter().take(count).collect();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| dataset.train[i].clone()).collect()
    };
    Ok(VqaDataset {
        name: dataset.name.clone(),
        train,
        val: dataset.val.clone(),
        test: dataset.test.clone(),
        image_store: Arc::clone(&dataset.image_store),
    })
}

/// Question-type counts over a slice of triplets, indexed per
/// [`QuestionType::ALL`].
pub fn question_type_counts(triplets: &[Triplet]) -> [usize; 7] {
    let mut counts = [0usize; 7];
    for t in triplets {
        counts[t.question_type().index()] += 1;
    }
    counts
}

/// Summary statistics for a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub name: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// (decoy count, number of triplets with that count), ascending.
    pub decoy_histogram: Vec<(usize, usize)>,
    /// Question-type frequencies over the train split, per
    /// [`QuestionType::ALL`] order; zero when the train split is empty.
    pub train_type_frequencies: [f64; 7],
}

pub fn dataset_stats(dataset: &VqaDataset) -> DatasetStats {
    let mut histogram = std::collections::BTreeMap::new();
    for t in dataset.all_triplets() {
        *histogram.entry(t.decoy_count()).or_insert(0usize) += 1;
    }
    let counts = question_type_counts(&dataset.train);
    let total: usize = counts.iter().sum();
    let mut freqs = [0.0; 7];
    if total > 0 {
        for (f, c) in freqs.iter_mut().zip(counts) {
            *f = c as f64 / total as f64;
        }
    }
    DatasetStats {
        name: dataset.name.clone(),
        train: dataset.train.len(),
        val: dataset.val.len(),
        test: dataset.test.len(),
        text_dim: dataset.text_dim().unwrap_or(0),
        image_dim: dataset.image_dim(),
        decoy_histogram: histogram.into_iter().collect(),
        train_type_frequencies: freqs,
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{}: train {} / val {} / test {} (text dim {}, image dim {})",
            self.name, self.train, self.val, self.test, self.text_dim, self.image_dim
        )?;
        write!(f, "  decoys per triplet:")?;
        for (k, n) in &self.decoy_histogram {
            write!(f, " {k}x{n}")?;
        }
        writeln!(f)?;
        write!(f, "  train question types:")?;
        for (ty, freq) in QuestionType::ALL.iter().zip(self.train_type_frequencies) {
            write!(f, " {ty}={freq:.3}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod test_fixtures {
    use super::*;

    /// Builds a tiny in-memory dataset with the given correct-answer texts,
    /// one train triplet each.
    pub fn dataset_with_answers(answers: &[&str]) -> VqaDataset {
        let dim = 2;
        let mut store = ImageFeatureStore::new(dim).unwrap();
        let mut train = Vec::new();
        for (i, ans) in answers.iter().enumerate() {
            store
                .insert(i as u64, FeatureVector::new(vec![i as f64, 0.0]).unwrap())
                .unwrap();
            train.push(Triplet {
                id: format!("t{i}"),
                image_id: i as u64,
                question: format!("what is item {i}"),
                question_feat: FeatureVector::zeros(dim),
                correct: Answer {
                    text: ans.to_string(),
                    feat: FeatureVector::new(vec![1.0, 0.0]).unwrap(),
                },
                decoys: vec![Answer {
                    text: format!("decoy {i}"),
                    feat: FeatureVector::new(vec![0.0, 1.0]).unwrap(),
                }],
                gt_answers: None,
            });
        }
        VqaDataset {
            name: "fixture".into(),
            train,
            val: Vec::new(),
            test: Vec::new(),
            image_store: Arc::new(store),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_fixtures::dataset_with_answers;
    use super::*;

    #[test]
    fn filter_yes_no_drops_only_yes_no() {
        let ds = dataset_with_answers(&[
            "yes", "no", "Yes.", "red", "a cat", "NO", "yesterday", "nothing", "maybe", "green",
        ]);
        let filtered = filter_yes_no(&ds);
        assert_eq!(filtered.train.len(), 6);
        let ids: Vec<&str> = filtered.train.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, vec!["t3", "t4", "t6", "t7", "t8", "t9"]);
    }

    #[test]
    fn filter_yes_no_is_idempotent_and_identity_without_yes_no() {
        let clean = dataset_with_answers(&["red", "green", "blue"]);
        let once = filter_yes_no(&clean);
        assert_eq!(once.train.len(), 3);
        let all_yes = dataset_with_answers(&["yes", "no"]);
        let emptied = filter_yes_no(&all_yes);
        assert!(emptied.train.is_empty());
        let twice = filter_yes_no(&emptied);
        assert_eq!(twice.train.len(), emptied.train.len());
    }

    #[test]
    fn subsample_behaviour() {
        let answers: Vec<String> = (0..160).map(|i| format!("ans{i}")).collect();
        let refs: Vec<&str> = answers.iter().map(|s| s.as_str()).collect();
        let ds = dataset_with_answers(&refs);

        let full = subsample(&ds, 1.0, 7).unwrap();
        assert_eq!(full.train.len(), 160);
        assert_eq!(
            full.train.iter().map(|t| &t.id).collect::<Vec<_>>(),
            ds.train.iter().map(|t| &t.id).collect::<Vec<_>>()
        );

        let sixteenth = subsample(&ds, 1.0 / 16.0, 7).unwrap();
        assert_eq!(sixteenth.train.len(), 10);

        let again = subsample(&ds, 1.0 / 16.0, 7).unwrap();
        assert_eq!(
            sixteenth.train.iter().map(|t| &t.id).collect::<Vec<_>>(),
            again.train.iter().map(|t| &t.id).collect::<Vec<_>>()
        );
        let other_seed = subsample(&ds, 1.0 / 16.0, 8).unwrap();
        assert_ne!(
            sixteenth.train.iter().map(|t| &t.id).collect::<Vec<_>>(),
            other_seed.train.iter().map(|t| &t.id).collect::<Vec<_>>()
        );

        assert!(subsample(&ds, 0.0, 7).is_err());
        assert!(subsample(&ds, 1.0 / 1000.0, 7).is_err());
    }

    #[test]
    fn stats_count_question_types() {
        let mut ds = dataset_with_answers(&["a", "b", "c", "d", "e"]);
        ds.train[0].question = "where is it".into();
        ds.train[1].question = "where was it".into();
        // Remaining three keep their "what" questions: 60/40 what/where.
        ds.train.truncate(5);
        let stats = dataset_stats(&ds);
        assert_eq!(stats.train_type_frequencies[QuestionType::What.index()], 0.6);
        assert_eq!(stats.train_type_frequencies[QuestionType::Where.index()], 0.4);
        assert_eq!(stats.train, 5);
    }

    #[test]
    fn stats_empty_dataset() {
        let ds = VqaDataset {
            name: "empty".into(),
            train: vec![],
            val: vec![],
            test: vec![],
            image_store: Arc::new(ImageFeatureStore::new(4).unwrap()),
        };
        let stats = dataset_stats(&ds);
        assert_eq!((stats.train, stats.val, stats.test), (0, 0, 0));
        assert_eq!(stats.train_type_frequencies, [0.0; 7]);
    }

    #[test]
    fn validate_rejects_decoy_equal_to_correct() {
        let mut ds = dataset_with_answers(&["red"]);
        ds.train[0].decoys[0].text = "red".into();
        assert!(ds.validate().is_err());
    }
}
