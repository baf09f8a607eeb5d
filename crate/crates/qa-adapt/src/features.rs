//! Feature vectors, pretrained word-embedding tables, precomputed image
//! features, and question-type classification.
//!
//! Text is featurized as the mean of the embedding vectors of its
//! in-vocabulary tokens; image features are consumed precomputed from a
//! binary store (this toolkit never runs a CNN).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A fixed-dimension real vector; the universal currency for image,
/// question, and answer representations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Builds a vector, rejecting NaN or infinite components.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "feature vector component {pos} is not finite"
            )));
        }
        Ok(FeatureVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A map from feature space to feature space, applied to target-domain
/// features at inference time. Implemented by the learned residual
/// transforms and by CORAL's affine alignment.
pub trait FeatureTransform {
    fn apply(&self, x: &FeatureVector) -> FeatureVector;
}

/// Applies an optional transform, defaulting to identity.
pub(crate) fn apply_opt(t: Option<&dyn FeatureTransform>, x: &FeatureVector) -> FeatureVector {
    match t {
        Some(t) => t.apply(x),
        None => x.clone(),
    }
}

/// An affine map `x -> A x + b` on feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    matrix: crate::nn::Matrix,
    offset: Vec<f64>,
}

impl AffineMap {
    /// `matrix` must be square (dim x dim) and `offset` length dim.
    pub fn new(matrix: crate::nn::Matrix, offset: Vec<f64>) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::dim("affine matrix (must be square)", matrix.rows(), matrix.cols()));
        }
        if offset.len() != matrix.rows() {
            return Err(Error::dim("affine offset", matrix.rows(), offset.len()));
        }
        Ok(AffineMap { matrix, offset })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = crate::nn::Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        AffineMap {
            matrix: m,
            offset: vec![0.0; dim],
        }
    }

    pub fn translation(offset: Vec<f64>) -> Self {
        let mut map = AffineMap::identity(offset.len());
        map.offset = offset;
        map
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn matrix(&self) -> &crate::nn::Matrix {
        &self.matrix
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "affine input dimension");
        let d = self.dim();
        let mut out = self.offset.clone();
        for i in 0..d {
            let row = self.matrix.row(i);
            let mut acc = 0.0;
            for (a, &v) in row.iter().zip(x) {
                acc += a * v;
            }
            out[i] += acc;
        }
        out
    }

    /// Inverse map `y -> A^-1 (y - b)`, via Gauss-Jordan elimination with
    /// partial pivoting. Errors when the matrix is singular.
    pub fn inverse(&self) -> Result<AffineMap> {
        let d = self.dim();
        // Augmented [A | I].
        let mut a: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut row = self.matrix.row(i).to_vec();
                row.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::InvalidConfig("affine matrix is singular".into()));
            }
            a.swap(col, pivot);
            let p = a[col][col];
            for v in &mut a[col] {
                *v /= p;
            }
            for row in 0..d {
                if row == col {
                    continue;
                }
                let factor = a[row][col];
                if factor == 0.0 {
                    continue;
                }
                let (pivot_row, other) = if row < col {
                    let (lo, hi) = a.split_at_mut(col);
                    (&hi[0], &mut lo[row])
                } else {
                    let (lo, hi) = a.split_at_mut(row);
                    (&lo[col], &mut hi[0])
                };
                for (o, &pv) in other.iter_mut().zip(pivot_row.iter()) {
                    *o -= factor * pv;
                }
            }
        }
        let mut inv = crate::nn::Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                inv.set(i, j, a[i][d + j]);
            }
        }
        // b' = -A^-1 b.
        let mut neg_shift = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += inv.get(i, j) * self.offset[j];
            }
            neg_shift[i] = -acc;
        }
        Ok(AffineMap {
            matrix: inv,
            offset: neg_shift,
        })
    }
}

impl FeatureTransform for AffineMap {
    fn apply(&self, x: &FeatureVector) -> FeatureVector {
        FeatureVector(self.apply_slice(x.as_slice()))
    }
}

/// A pretrained word-vector table, immutable after load.
///
/// Lookups are case-insensitive: keys are lowercased at load time and
/// queries are lowercased before lookup.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(&token.to_lowercase()).map(|v| v.as_slice())
    }

    /// Builds a table directly from (token, vector) pairs. Duplicate tokens
    /// keep the first occurrence.
    pub fn from_entries(dim: usize, pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut entries = HashMap::new();
        for (token, vec) in pairs {
            if vec.len() != dim {
                return Err(Error::dim(format!("embedding for token `{token}`"), dim, vec.len()));
            }
            entries.entry(token.to_lowercase()).or_insert(vec);
        }
        Ok(EmbeddingTable { dim, entries })
    }
}

/// Loads a word-vector table from the classic text format: one
/// `token v1 ... vd` per line, with an optional `count dim` header line.
///
/// The dimension is taken from the first data line; later lines with a
/// different dimension are format errors naming the offending line.
/// Duplicate tokens keep the first occurrence.
pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut dim: Option<usize> = None;
    let mut entries: HashMap<String, Vec<f64>> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut tokens = line.split_whitespace();
        let Some(word) = tokens.next() else {
            continue; // blank line
        };
        let rest: Vec<&str> = tokens.collect();

        // A first line of exactly two integers is the `count dim` header.
        if line_no == 1
            && rest.len() == 1
            && word.parse::<u64>().is_ok()
            && rest[0].parse::<u64>().is_ok()
        {
            continue;
        }

        let mut values = Vec::with_capacity(rest.len());
        for tok in &rest {
            let v: f64 = tok.parse().map_err(|_| {
                Error::format(path, Some(line_no), format!("cannot parse `{tok}` as a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::format(path, Some(line_no), "non-finite embedding value"));
            }
            values.push(v);
        }
        match dim {
            None => {
                if values.is_empty() {
                    return Err(Error::format(path, Some(line_no), "token with no vector components"));
                }
                dim = Some(values.len());
            }
            Some(d) if values.len() != d => {
                return Err(Error::format(
                    path,
                    Some(line_no),
                    format!("expected {d} components, found {}", values.len()),
                ));
            }
            _ => {}
        }
        entries.entry(word.to_lowercase()).or_insert(values);
    }

    match dim {
        Some(dim) => Ok(EmbeddingTable { dim, entries }),
        None => Err(Error::format(path, None, "empty embedding file")),
    }
}

/// Lowercases, strips ASCII punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// Featurizes text as the component-wise mean of its in-vocabulary token
/// embeddings. Out-of-vocabulary tokens are skipped; if nothing is in
/// vocabulary the zero vector is returned.
pub fn embed_text(table: &EmbeddingTable, text: &str) -> FeatureVector {
    let mut sum = vec![0.0; table.dim()];
    let mut count = 0usize;
    for token in tokenize(text) {
        if let Some(vec) = table.get(&token) {
            for (s, v) in sum.iter_mut().zip(vec) {
                *s += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        let n = count as f64;
        for s in &mut sum {
            *s /= n;
        }
    }
    FeatureVector(sum)
}

/// The 6W question types plus a catch-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuestionType {
    What,
    Where,
    How,
    When,
    Why,
    Who,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 7] = [
        QuestionType::What,
        QuestionType::Where,
        QuestionType::How,
        QuestionType::When,
        QuestionType::Why,
        QuestionType::Who,
        QuestionType::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionType::What => "what",
            QuestionType::Where => "where",
            QuestionType::How => "how",
            QuestionType::When => "when",
            QuestionType::Why => "why",
            QuestionType::Who => "who",
            QuestionType::Other => "other",
        }
    }

    /// Index into [`QuestionType::ALL`].
    pub fn index(self) -> usize {
        QuestionType::ALL.iter().position(|t| *t == self).unwrap()
    }
}

impl std::fmt::Display for QuestionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for QuestionType {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

/// Classifies a question by its first token after normalization.
pub fn question_type(question: &str) -> QuestionType {
    let tokens = tokenize(question);
    match tokens.first().map(|s| s.as_str()) {
        Some("what") => QuestionType::What,
        Some("where") => QuestionType::Where,
        Some("how") => QuestionType::How,
        Some("when") => QuestionType::When,
        Some("why") => QuestionType::Why,
        Some("who") => QuestionType::Who,
        _ => QuestionType::Other,
    }
}

const IMAGE_STORE_MAGIC: &[u8; 4] = b"QAFV";
const IMAGE_STORE_VERSION: u32 = 1;

/// Precomputed image features keyed by image id.
#[derive(Debug, Clone)]
pub struct ImageFeatureStore {
    dim: usize,
    records: HashMap<u64, Vec<f64>>,
}

impl ImageFeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("image feature dimension must be positive".into()));
        }
        Ok(ImageFeatureStore {
            dim,
            records: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.records.contains_key(&id)
    }

    pub fn get(&self, id: u64) -> Option<FeatureVector> {
        self.records.get(&id).map(|v| FeatureVector(v.clone()))
    }

    pub fn insert(&mut self, id: u64, feat: FeatureVector) -> Result<()> {
        if feat.len() != self.dim {
            return Err(Error::dim(format!("image feature {id}"), self.dim, feat.len()));
        }
        if self.records.insert(id, feat.into_vec()).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate image id {id}")));
        }
        Ok(())
    }

    /// Ids in ascending order, for deterministic serialization.
    pub fn sorted_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// Loads a binary feature store: magic `QAFV`, u32 version, u32 dim,
/// u64 count, then count records of (u64 id, dim x f32), little-endian.
pub fn load_image_features(path: impl AsRef<Path>) -> Result<ImageFeatureStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    read_feature_store(&mut reader).map_err(|e| match e {
        Error::Format { line, msg, .. } => Error::format(path, line, msg),
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn read_feature_store(reader: &mut impl Read) -> Result<ImageFeatureStore> {
    let no_path = Path::new("");
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|e| Error::io(no_path, e))?;
    if &magic != IMAGE_STORE_MAGIC {
        return Err(Error::format(no_path, None, "bad magic bytes; not a feature store"));
    }
    let version = read_u32(reader)?;
    if version != IMAGE_STORE_VERSION {
        return Err(Error::format(no_path, None, format!("unsupported version {version}")));
    }
    let dim = read_u32(reader)? as usize;
    if dim == 0 {
        return Err(Error::format(no_path, None, "feature dimension is zero"));
    }
    let count = read_u64(reader)?;
    let mut store = ImageFeatureStore::new(dim)?;
    let mut buf = vec![0u8; 4 * dim];
    for _ in 0..count {
        let id = read_u64(reader)?;
        reader.read_exact(&mut buf).map_err(|e| Error::io(no_path, e))?;
        let mut values = Vec::with_capacity(dim);
        for chunk in buf.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::format(no_path, None, format!("non-finite feature in record {id}")));
            }
            values.push(v as f64);
        }
        if store.records.insert(id, values).is_some() {
            return Err(Error::format(no_path, None, format!("duplicate id {id}")));
        }
    }
    Ok(store)
}

/// Writes a feature store in the binary format, records sorted by id.
/// Components are stored as f32.
pub fn save_image_features(store: &ImageFeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writer.write_all(IMAGE_STORE_MAGIC).map_err(io_err)?;
    writer.write_all(&IMAGE_STORE_VERSION.to_le_bytes()).map_err(io_err)?;
    writer.write_all(&(store.dim as u32).to_le_bytes()).map_err(io_err)?;
    writer.write_all(&(store.records.len() as u64).to_le_bytes()).map_err(io_err)?;
    for id in store.sorted_ids() {
        writer.write_all(&id.to_le_bytes()).map_err(io_err)?;
        for &v in &store.records[&id] {
            writer.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    writer.flush().map_err(io_err)
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| Error::io("", e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(reader: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    reader.read_exact(&mut buf).map_err(|e| Error::io("", e))?;
    Ok(u64::from_le_bytes(buf))
}

/// FNV-1a 64-bit hash; stable across runs and platforms, used to key
/// text-feature sidecar records by string id.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_table_basic() {
        let f = write_temp("cat 1.0 2.0 3.0\ndog 4.0 5.0 6.0\n");
        let table = load_embedding_table(f.path()).unwrap();
        assert_eq!(table.dim(), 3);
        assert_eq!(table.len(), 2);
        assert_eq!(table.get("cat"), Some(&[1.0, 2.0, 3.0][..]));
    }

    #[test]
    fn load_table_skips_header() {
        let f = write_temp("2 3\ncat 1.0 2.0 3.0\ndog 4.0 5.0 6.0\n");
        let table = load_embedding_table(f.path()).unwrap();
        assert_eq!(table.dim(), 3);
        assert_eq!(table.len(), 2);
    }

    #[test]
    fn load_table_inconsistent_dim_names_line() {
        let f = write_temp("cat 1.0 2.0 3.0\ndog 4.0 5.0\n");
        let err = load_embedding_table(f.path()).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, Some(2)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_table_empty_file_is_error() {
        let f = write_temp("");
        assert!(load_embedding_table(f.path()).is_err());
    }

    #[test]
    fn load_table_duplicate_keeps_first() {
        let f = write_temp("cat 1.0 2.0\nCAT 9.0 9.0\n");
        let table = load_embedding_table(f.path()).unwrap();
        assert_eq!(table.get("cat"), Some(&[1.0, 2.0][..]));
    }

    fn small_table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            3,
            [
                ("cat".to_string(), vec![1.0, 2.0, 3.0]),
                ("dog".to_string(), vec![3.0, 0.0, -1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn embed_single_word_is_its_vector() {
        let table = small_table();
        assert_eq!(embed_text(&table, "cat").as_slice(), &[1.0, 2.0, 3.0]);
        // Case-insensitive with punctuation stripped.
        assert_eq!(embed_text(&table, "Cat!").as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn embed_two_words_is_mean() {
        let table = small_table();
        // Hand arithmetic: mean([1,2,3],[3,0,-1]) = [2,1,1].
        assert_eq!(embed_text(&table, "cat dog").as_slice(), &[2.0, 1.0, 1.0]);
    }

    #[test]
    fn embed_oov_and_empty_are_zero() {
        let table = small_table();
        assert_eq!(embed_text(&table, "").as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(embed_text(&table, "zebra lion").as_slice(), &[0.0, 0.0, 0.0]);
        // OOV tokens are skipped, not averaged in.
        assert_eq!(embed_text(&table, "cat zebra").as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn question_type_classification() {
        assert_eq!(question_type("What is in the cup?"), QuestionType::What);
        assert_eq!(question_type("When was the photo taken"), QuestionType::When);
        assert_eq!(question_type("Is the dog brown?"), QuestionType::Other);
        assert_eq!(question_type("  where is it"), QuestionType::Where);
        assert_eq!(question_type(""), QuestionType::Other);
    }

    #[test]
    fn image_store_round_trip_bit_exact() {
        let mut store = ImageFeatureStore::new(4).unwrap();
        store
            .insert(7, FeatureVector::new(vec![0.25, -1.5, 3.0, 0.125]).unwrap())
            .unwrap();
        store
            .insert(3, FeatureVector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_image_features(&store, f.path()).unwrap();
        let loaded = load_image_features(f.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get(7).unwrap(), store.get(7).unwrap());
        assert_eq!(loaded.get(3).unwrap(), store.get(3).unwrap());
        // Second save produces identical bytes.
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save_image_features(&loaded, f2.path()).unwrap();
        assert_eq!(std::fs::read(f.path()).unwrap(), std::fs::read(f2.path()).unwrap());
    }

    #[test]
    fn image_store_empty_and_bad_inputs() {
        let store = ImageFeatureStore::new(5).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_image_features(&store, f.path()).unwrap();
        assert!(load_image_features(f.path()).unwrap().is_empty());

        assert!(ImageFeatureStore::new(0).is_err());

        // Truncated file.
        std::fs::write(f.path(), b"QAFV\x01\x00").unwrap();
        assert!(load_image_features(f.path()).is_err());

        // Bad magic.
        std::fs::write(f.path(), b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(load_image_features(f.path()).is_err());

        // dim = 0 in header.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"QAFV");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(f.path(), &bytes).unwrap();
        assert!(load_image_features(f.path()).is_err());
    }

    #[test]
    fn duplicate_image_id_rejected() {
        let mut store = ImageFeatureStore::new(2).unwrap();
        store.insert(1, FeatureVector::zeros(2)).unwrap();
        assert!(store.insert(1, FeatureVector::zeros(2)).is_err());
    }

    #[test]
    fn affine_inverse_round_trips() {
        let m = crate::nn::Matrix::from_rows(&[&[2.0, 1.0, 0.0], &[0.5, -1.0, 0.25], &[0.0, 0.3, 1.5]]).unwrap();
        let map = AffineMap::new(m, vec![1.0, -2.0, 0.5]).unwrap();
        let inv = map.inverse().unwrap();
        let x = vec![0.7, -0.3, 2.0];
        let back = inv.apply_slice(&map.apply_slice(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        // Singular matrix is rejected.
        let singular = crate::nn::Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        assert!(AffineMap::new(singular, vec![0.0, 0.0]).unwrap().inverse().is_err());
    }

    proptest! {
        // Any token reordering yields an identical embedding.
        #[test]
        fn embed_is_order_invariant(perm in proptest::sample::subsequence(vec!["cat", "dog", "cat", "dog", "dog"], 0..5)) {
            let table = small_table();
            let forward: Vec<&str> = perm.clone();
            let mut reversed = perm;
            reversed.reverse();
            let a = embed_text(&table, &forward.join(" "));
            let b = embed_text(&table, &reversed.join(" "));
            prop_assert_eq!(a, b);
        }

        // Convexity of the mean: output norm never exceeds the max token norm.
        #[test]
        fn embed_norm_bounded(words in proptest::collection::vec(proptest::sample::select(vec!["cat", "dog"]), 1..6)) {
            let table = small_table();
            let text = words.join(" ");
            let out = embed_text(&table, &text).norm();
            let max_norm = words
                .iter()
                .map(|w| {
                    let v = table.get(w).unwrap();
                    v.iter().map(|x| x * x).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max);
            prop_assert!(out <= max_norm + 1e-12);
        }
    }
}
