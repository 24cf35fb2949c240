//! Sentence embedding backends and cosine similarity.
//!
//! Three backend kinds share the [`Embedder`] trait:
//!
//! * `lexical`: hashed character 3-gram counts. Deterministic and
//!   dependency-free; the reference algorithm is fixed so vectors are stable
//!   across implementations (see [`lexical_vector`]).
//! * `precomputed`: vectors looked up by SHA-256 of the text from a JSON file.
//! * `remote`: an HTTP embedding service (see [`crate::remote`]).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::remote::{HttpTransport, Transport, UreqTransport};

/// Number of hash buckets of the lexical backend (2^18).
pub const LEXICAL_DIM: usize = 1 << 18;
/// Seed mixed into every lexical n-gram hash ("SIMPA" in ASCII).
pub const LEXICAL_SEED: u64 = 0x53_49_4d_50_41;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq)]
enum Values {
    Dense(Vec<f64>),
    /// Sorted by index, no duplicate indices, no zero values.
    Sparse(Vec<(u32, f64)>),
}

/// A fixed-length embedding tagged with the backend that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    backend_id: Arc<str>,
    dim: usize,
    values: Values,
}

impl EmbeddingVector {
    pub fn dense(backend_id: impl Into<Arc<str>>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding must have dim > 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding has non-finite values".into()));
        }
        Ok(EmbeddingVector {
            backend_id: backend_id.into(),
            dim: values.len(),
            values: Values::Dense(values),
        })
    }

    /// Builds a sparse vector from `(index, value)` entries; duplicate
    /// indices are summed.
    pub fn sparse(backend_id: impl Into<Arc<str>>, dim: usize, entries: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding must have dim > 0".into()));
        }
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, v) in entries {
            if i as usize >= dim {
                return Err(Error::InvalidArgument(format!("index {i} out of range for dim {dim}")));
            }
            if !v.is_finite() {
                return Err(Error::InvalidArgument("embedding has non-finite values".into()));
            }
            *acc.entry(i).or_insert(0.0) += v;
        }
        Ok(EmbeddingVector {
            backend_id: backend_id.into(),
            dim,
            values: Values::Sparse(acc.into_iter().filter(|(_, v)| *v != 0.0).collect()),
        })
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> f64 {
        match &self.values {
            Values::Dense(v) => v.get(i).copied().unwrap_or(0.0),
            Values::Sparse(v) => v
                .binary_search_by_key(&(i as u32), |(j, _)| *j)
                .map(|k| v[k].1)
                .unwrap_or(0.0),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match &self.values {
            Values::Dense(v) => v.clone(),
            Values::Sparse(v) => {
                let mut out = vec![0.0; self.dim];
                for (i, x) in v {
                    out[*i as usize] = *x;
                }
                out
            }
        }
    }

    pub fn scaled(&self, factor: f64) -> EmbeddingVector {
        let values = match &self.values {
            Values::Dense(v) => Values::Dense(v.iter().map(|x| x * factor).collect()),
            Values::Sparse(v) => Values::Sparse(v.iter().map(|(i, x)| (*i, x * factor)).collect()),
        };
        EmbeddingVector {
            values,
            ..self.clone()
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = match &self.values {
            Values::Dense(v) => v.iter().map(|x| x * x).sum(),
            Values::Sparse(v) => v.iter().map(|(_, x)| x * x).sum(),
        };
        sq.sqrt()
    }

    fn dot(&self, other: &EmbeddingVector) -> f64 {
        match (&self.values, &other.values) {
            (Values::Dense(a), Values::Dense(b)) => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            (Values::Sparse(a), Values::Sparse(b)) => {
                let (mut i, mut j, mut acc) = (0, 0, 0.0);
                while i < a.len() && j < b.len() {
                    match a[i].0.cmp(&b[j].0) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            acc += a[i].1 * b[j].1;
                            i += 1;
                            j += 1;
                        }
                    }
                }
                acc
            }
            (Values::Sparse(s), Values::Dense(d)) | (Values::Dense(d), Values::Sparse(s)) => {
                s.iter().map(|(i, x)| x * d[*i as usize]).sum()
            }
        }
    }
}

/// Cosine similarity. Zero-norm vectors have similarity 0 with everything.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    if a.backend_id != b.backend_id {
        return Err(Error::BackendMismatch {
            left: a.backend_id.to_string(),
            right: b.backend_id.to_string(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Lexical,
    Precomputed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub kind: BackendKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, String>,
}

impl BackendDescriptor {
    pub fn lexical(backend_id: impl Into<String>) -> Self {
        BackendDescriptor {
            backend_id: backend_id.into(),
            kind: BackendKind::Lexical,
            dim: LEXICAL_DIM,
            config: BTreeMap::new(),
        }
    }
}

/// Turns texts into vectors. Implementations are read-only after
/// construction and may be shared between threads.
pub trait Embedder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// One vector per text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Lexical normalization: lowercase, drop everything except letters, digits,
/// apostrophes and spaces, collapse whitespace.
pub fn lexical_normalize(text: &str) -> String {
    let mut kept = String::with_capacity(text.len());
    for c in text.chars() {
        let c = if c == '\u{2019}' { '\'' } else { c };
        if c.is_whitespace() {
            kept.push(' ');
        } else if c.is_alphanumeric() || c == '\'' {
            kept.extend(c.to_lowercase());
        }
    }
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// FNV-1a over the little-endian seed bytes followed by the n-gram's UTF-8
/// bytes, masked to [`LEXICAL_DIM`] buckets.
pub fn lexical_bucket(gram: &str) -> u32 {
    let mut h = FNV_OFFSET;
    for b in LEXICAL_SEED.to_le_bytes().iter().chain(gram.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h & (LEXICAL_DIM as u64 - 1)) as u32
}

/// Character 3-grams of the normalized text padded with one space per side.
pub fn lexical_trigrams(text: &str) -> Vec<String> {
    let padded: Vec<char> = format!(" {} ", lexical_normalize(text)).chars().collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

pub fn lexical_vector(backend_id: &str, text: &str) -> EmbeddingVector {
    EmbeddingVector::sparse(
        backend_id,
        LEXICAL_DIM,
        lexical_trigrams(text).iter().map(|g| (lexical_bucket(g), 1.0)),
    )
    .expect("buckets are in range")
}

pub struct LexicalBackend {
    descriptor: BackendDescriptor,
}

impl LexicalBackend {
    pub fn new(backend_id: impl Into<String>) -> Self {
        LexicalBackend {
            descriptor: BackendDescriptor::lexical(backend_id),
        }
    }
}

impl Embedder for LexicalBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        use rayon::prelude::*;
        Ok(texts
            .par_iter()
            .map(|t| lexical_vector(&self.descriptor.backend_id, t))
            .collect())
    }
}

pub const VECTORS_FORMAT: &str = "simpa-vectors";
pub const VECTORS_VERSION: u32 = 1;

/// On-disk precomputed vectors: a JSON object with a versioned header and a
/// map from the lowercase hex SHA-256 of each UTF-8 text to its vector.
///
/// ```json
/// {"format": "simpa-vectors", "version": 1, "backend_id": "mpnet",
///  "dim": 3, "vectors": {"<sha256 hex>": [0.1, 0.2, 0.3]}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorsFile {
    pub format: String,
    pub version: u32,
    pub backend_id: String,
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()).as_slice())
}

impl VectorsFile {
    pub fn new(backend_id: impl Into<String>, dim: usize) -> Self {
        VectorsFile {
            format: VECTORS_FORMAT.into(),
            version: VECTORS_VERSION,
            backend_id: backend_id.into(),
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, text: &str, vector: Vec<f64>) {
        self.vectors.insert(text_hash(text), vector);
    }

    /// Parses and validates the header and every vector.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let file: VectorsFile = serde_json::from_slice(bytes)?;
        if file.format != VECTORS_FORMAT {
            return Err(Error::InvalidArgument(format!("unknown vectors format {:?}", file.format)));
        }
        if file.version != VECTORS_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported vectors version {}", file.version)));
        }
        if file.dim == 0 {
            return Err(Error::InvalidArgument("vectors file has dim 0".into()));
        }
        for (hash, v) in &file.vectors {
            if v.len() != file.dim {
                return Err(Error::DimensionMismatch {
                    left: file.dim,
                    right: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite value in vector {hash}")));
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        VectorsFile::parse(&bytes)
    }
}

pub struct PrecomputedBackend {
    descriptor: BackendDescriptor,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedBackend {
    pub fn new(descriptor: BackendDescriptor, file: VectorsFile) -> Result<Self> {
        if file.dim != descriptor.dim {
            return Err(Error::DimensionMismatch {
                left: descriptor.dim,
                right: file.dim,
            });
        }
        Ok(PrecomputedBackend {
            descriptor,
            vectors: file.vectors.into_iter().collect(),
        })
    }
}

impl Embedder for PrecomputedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        let mut missing = Vec::new();
        for text in texts {
            let hash = text_hash(text);
            match self.vectors.get(&hash) {
                Some(v) => out.push(EmbeddingVector::dense(self.descriptor.backend_id.as_str(), v.clone())?),
                None => missing.push(hash),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingVectors {
                backend_id: self.descriptor.backend_id.clone(),
                missing,
            });
        }
        Ok(out)
    }
}

/// Builds a backend from its descriptor. Relative paths in the descriptor
/// config resolve against `base_dir`.
pub fn build_backend(descriptor: &BackendDescriptor, base_dir: &Path) -> Result<Arc<dyn Embedder>> {
    build_backend_with(descriptor, base_dir, Arc::new(UreqTransport::default()))
}

pub fn build_backend_with(
    descriptor: &BackendDescriptor,
    base_dir: &Path,
    transport: Arc<dyn HttpTransport>,
) -> Result<Arc<dyn Embedder>> {
    match descriptor.kind {
        BackendKind::Lexical => {
            if descriptor.dim != LEXICAL_DIM {
                return Err(Error::Config(format!(
                    "lexical backend {} must have dim {LEXICAL_DIM}",
                    descriptor.backend_id
                )));
            }
            Ok(Arc::new(LexicalBackend::new(descriptor.backend_id.clone())))
        }
        BackendKind::Precomputed => {
            let path = descriptor.config.get("path").ok_or_else(|| {
                Error::Config(format!("precomputed backend {} needs config.path", descriptor.backend_id))
            })?;
            let path = resolve(base_dir, path);
            Ok(Arc::new(PrecomputedBackend::new(descriptor.clone(), VectorsFile::load(&path)?)?))
        }
        BackendKind::Remote => Ok(Arc::new(crate::remote::RemoteEmbedder::from_descriptor(
            descriptor.clone(),
            Transport::new(transport),
        )?)),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::dense("t", values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[1.0, 2.0, 3.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&a, &a.scaled(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(cosine(&v(&[1.0]), &v(&[1.0, 0.0])), Err(Error::DimensionMismatch { .. })));
        let other = EmbeddingVector::dense("u", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(cosine(&a, &other), Err(Error::BackendMismatch { .. })));
    }

    #[test]
    fn vectors_reject_bad_values() {
        assert!(EmbeddingVector::dense("t", vec![]).is_err());
        assert!(EmbeddingVector::dense("t", vec![f64::NAN]).is_err());
        assert!(EmbeddingVector::sparse("t", 4, [(4, 1.0)]).is_err());
    }

    #[test]
    fn sparse_and_dense_agree() {
        let s = EmbeddingVector::sparse("t", 4, [(1, 2.0), (3, 1.0), (1, 1.0)]).unwrap();
        let d = v(&[0.0, 3.0, 0.0, 1.0]);
        assert_eq!(s.to_dense(), d.to_dense());
        assert_eq!(s.get(1), 3.0);
        assert!((cosine(&s, &d).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lexical_normalization() {
        assert_eq!(lexical_normalize("I avoid  crowds."), "i avoid crowds");
        assert_eq!(lexical_normalize("I\u{2019}m HERE!\n ok"), "i'm here ok");
        assert_eq!(lexical_trigrams("ab"), [" ab", "ab "]);
        assert!(lexical_trigrams("").is_empty());
    }

    #[test]
    fn lexical_backend_determinism() {
        let b = LexicalBackend::new("lex");
        let texts = vec!["I avoid crowds".to_string(), "I avoid crowds".to_string(), "I avoid crowds.".to_string()];
        let out = b.embed_batch(&texts).unwrap();
        assert_eq!(out[0], out[1]);
        assert!(cosine(&out[0], &out[2]).unwrap() >= 0.95);
        assert_eq!(out[0].dim(), LEXICAL_DIM);
    }

    #[test]
    fn precomputed_miss_names_hash() {
        let mut file = VectorsFile::new("pre", 2);
        file.insert("a", vec![1.0, 0.0]);
        file.insert("b", vec![0.0, 1.0]);
        let desc = BackendDescriptor {
            backend_id: "pre".into(),
            kind: BackendKind::Precomputed,
            dim: 2,
            config: BTreeMap::new(),
        };
        let b = PrecomputedBackend::new(desc, file).unwrap();
        let err = b.embed_batch(&["a".into(), "b".into(), "c".into()]).unwrap_err();
        match err {
            Error::MissingVectors { missing, .. } => assert_eq!(missing, vec![text_hash("c")]),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(b.embed_batch(&["b".into()]).unwrap()[0].to_dense(), vec![0.0, 1.0]);
    }

    #[test]
    fn vectors_file_header_checked() {
        let mut file = VectorsFile::new("pre", 2);
        file.insert("a", vec![1.0, 0.0]);
        let bytes = serde_json::to_vec(&file).unwrap();
        assert_eq!(VectorsFile::parse(&bytes).unwrap(), file);
        let mut bad = file.clone();
        bad.version = 9;
        assert!(VectorsFile::parse(&serde_json::to_vec(&bad).unwrap()).is_err());
        let mut bad = file.clone();
        bad.vectors.insert("x".into(), vec![1.0]);
        assert!(VectorsFile::parse(&serde_json::to_vec(&bad).unwrap()).is_err());
    }

    #[test]
    fn text_hash_is_sha256() {
        assert_eq!(
            text_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
            scale in 0.001f64..1000.0,
        ) {
            let (va, vb) = (v(&a), v(&b));
            let ab = cosine(&va, &vb).unwrap();
            prop_assert!((ab - cosine(&vb, &va).unwrap()).abs() <= 1e-12);
            prop_assert!((cosine(&va.scaled(scale), &vb).unwrap() - ab).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
