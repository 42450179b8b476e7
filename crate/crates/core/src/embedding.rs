//! Sentence embeddings and exact cosine-similarity retrieval.
//!
//! Vectors are L2-normalized when an index is built, so a query is scored
//! against every entry with a plain dot product. Retrieval is exhaustive: the
//! full score list is partially selected and the winners sorted, which keeps
//! results identical to a brute-force sort.
//!
//! Ordering contract: `top_k` returns descending scores, `bottom_k` ascending
//! scores, and both break exact ties by ascending example id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::transport::{EndpointConfig, JsonClient};

/// A finite, fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(components: Vec<f32>) -> Result<Self> {
        if components.iter().all(|c| c.is_finite()) {
            Ok(Vector(components))
        } else {
            Err(Error::NonFinite)
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&c| f64::from(c) * f64::from(c)).sum::<f64>().sqrt()
    }

    /// Unit-length copy; fails on the zero vector.
    pub fn normalized(&self) -> Result<Vector> {
        let norm = self.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(Vector(self.0.iter().map(|&c| (f64::from(c) / norm) as f32).collect()))
    }
}

impl TryFrom<Vec<f32>> for Vector {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Vec<f32> {
        v.0
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn clamp_score(s: f64) -> f64 {
    // `+ 0.0` folds -0.0 into 0.0 so equal scores compare equal under total_cmp.
    s.clamp(-1.0, 1.0) + 0.0
}

pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(clamp_score(dot(a.as_slice(), b.as_slice()) / (na * nb)))
}

/// A sentence embedder.
pub trait Embedder: Send + Sync {
    /// Identifies the model, recorded in every index built with it.
    fn fingerprint(&self) -> String;

    /// One vector per text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>>;
}

/// Embeds `texts`, checking one vector per text and a constant dimension.
pub fn embed_batch(provider: &dyn Embedder, texts: &[&str]) -> Result<Vec<Vector>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::InvalidArgument(format!("text {i} is empty")));
    }
    let vectors = provider.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::Protocol(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    let dim = vectors[0].dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: v.dim() });
    }
    Ok(vectors)
}

/// Offline embedder: hashed character 3-gram counts, L2-normalized.
///
/// Text is lower-cased and padded with one space on each side; every window
/// of three chars is hashed with 64-bit FNV-1a over its UTF-8 bytes into
/// `dim` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 256 }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        HashingEmbedder { dim: dim.max(1) }
    }

    pub fn embed_one(&self, text: &str) -> Vector {
        let padded: Vec<char> =
            std::iter::once(' ').chain(text.to_lowercase().chars()).chain(std::iter::once(' ')).collect();
        let mut counts = vec![0f64; self.dim];
        let mut buf = [0u8; 12];
        for window in padded.windows(3) {
            let mut len = 0;
            for c in window {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            counts[(fnv1a(&buf[..len]) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        Vector(counts.iter().map(|c| (c / norm) as f32).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Embedder for HashingEmbedder {
    fn fingerprint(&self) -> String {
        format!("hashing-char3-fnv1a-{}", self.dim)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Replays embeddings captured elsewhere, keyed by exact text.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    fingerprint: String,
    table: HashMap<String, Vector>,
}

#[derive(Deserialize)]
struct PrecomputedRow {
    text: String,
    vector: Vector,
}

impl PrecomputedEmbedder {
    pub fn new(fingerprint: impl Into<String>, table: HashMap<String, Vector>) -> Self {
        PrecomputedEmbedder { fingerprint: fingerprint.into(), table }
    }

    /// Reads `{"text": ..., "vector": [...]}` lines.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: PrecomputedRow = serde_json::from_str(&line)
                .map_err(|e| Error::Record { line: i + 1, message: e.to_string() })?;
            table.insert(row.text, row.vector);
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
        Ok(PrecomputedEmbedder::new(format!("precomputed:{stem}"), table))
    }
}

impl Embedder for PrecomputedEmbedder {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>> {
        texts
            .iter()
            .map(|t| {
                self.table.get(*t).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("no precomputed embedding for {t:?}"))
                })
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct EmbedRequest<'a> {
    pub texts: Vec<&'a str>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

/// Client for `POST /embed`.
#[derive(Debug)]
pub struct HttpEmbedder {
    client: JsonClient,
    model: Option<String>,
}

impl HttpEmbedder {
    pub fn new(config: EndpointConfig, model: Option<String>) -> Self {
        HttpEmbedder { client: JsonClient::new(config), model }
    }

    pub fn requests_sent(&self) -> u64 {
        self.client.requests_sent()
    }
}

impl Embedder for HttpEmbedder {
    fn fingerprint(&self) -> String {
        match &self.model {
            Some(model) => format!("http:{model}"),
            None => format!("http:{}", self.client.base_url()),
        }
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>> {
        let response: EmbedResponse =
            self.client.post("/embed", &EmbedRequest { texts: texts.to_vec() })?;
        response
            .vectors
            .into_iter()
            .map(|v| Vector::new(v).map_err(|_| Error::Protocol("non-finite embedding".into())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHit {
    pub example_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub batch_size: usize,
    pub parallelism: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { batch_size: 64, parallelism: 4 }
    }
}

const MAGIC: &[u8; 8] = b"XLPINDEX";
const FORMAT_VERSION: u32 = 1;

/// Immutable store of unit vectors keyed by example id, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    fingerprint: String,
    ids: Vec<usize>,
    data: Vec<f32>,
}

impl EmbeddingIndex {
    /// Normalizes and stores `entries`. Ids must be unique.
    pub fn from_vectors(
        fingerprint: impl Into<String>,
        mut entries: Vec<(usize, Vector)>,
    ) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidArgument("cannot build an empty index".into()));
        };
        let dim = first.1.dim();
        entries.sort_by_key(|(id, _)| *id);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate example id in index".into()));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: v.dim() });
            }
            let unit = v.normalized().map_err(|e| Error::EmbeddingFailed {
                id,
                message: e.to_string(),
            })?;
            ids.push(id);
            data.extend_from_slice(unit.as_slice());
        }
        Ok(EmbeddingIndex { dim, fingerprint: fingerprint.into(), ids, data })
    }

    /// Embeds every example with `provider` in batches, up to
    /// `options.parallelism` batches at a time, and indexes the results.
    pub fn build(
        examples: &[LabeledExample],
        provider: &dyn Embedder,
        options: BuildOptions,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("cannot build an empty index".into()));
        }
        let batch = options.batch_size.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallelism.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let chunks: Vec<&[LabeledExample]> = examples.chunks(batch).collect();
        let embedded: Vec<Result<Vec<Vector>>> = pool.install(|| {
            chunks
                .par_iter()
                .map(|chunk| {
                    let texts: Vec<&str> = chunk.iter().map(|e| e.text.as_str()).collect();
                    embed_batch(provider, &texts).map_err(|e| Error::EmbeddingFailed {
                        id: chunk[0].id,
                        message: e.to_string(),
                    })
                })
                .collect()
        });
        let mut entries = Vec::with_capacity(examples.len());
        for (chunk, vectors) in chunks.iter().zip(embedded) {
            for (ex, v) in chunk.iter().zip(vectors?) {
                entries.push((ex.id, v));
            }
        }
        if let Some(w) = entries.windows(2).find(|w| w[0].1.dim() != w[1].1.dim()) {
            return Err(Error::EmbeddingFailed {
                id: w[1].0,
                message: format!("dimension {} differs from {}", w[1].1.dim(), w[0].1.dim()),
            });
        }
        EmbeddingIndex::from_vectors(provider.fingerprint(), entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vector(&self, example_id: usize) -> Option<&[f32]> {
        let row = self.ids.binary_search(&example_id).ok()?;
        Some(self.row(row))
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Embeds a query text with `provider`, checking it matches this index.
    pub fn embed_query(&self, provider: &dyn Embedder, text: &str) -> Result<Vector> {
        let v = embed_batch(provider, &[text])?.remove(0);
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: v.dim() });
        }
        Ok(v)
    }

    fn scores(&self, query: &Vector, k: usize) -> Result<Vec<SimilarityHit>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: query.dim() });
        }
        if k == 0 || k > self.len() {
            return Err(Error::KOutOfRange { k, size: self.len() });
        }
        let q = query.normalized()?;
        Ok(self
            .ids
            .iter()
            .enumerate()
            .map(|(row, &id)| SimilarityHit {
                example_id: id,
                score: clamp_score(dot(self.row(row), q.as_slice())),
            })
            .collect())
    }

    /// The `k` most similar entries, descending score, ties by ascending id.
    pub fn top_k(&self, query: &Vector, k: usize) -> Result<Vec<SimilarityHit>> {
        let hits = self.scores(query, k)?;
        Ok(select(hits, k, |a, b| {
            b.score.total_cmp(&a.score).then(a.example_id.cmp(&b.example_id))
        }))
    }

    /// The `k` least similar entries, ascending score, ties by ascending id.
    pub fn bottom_k(&self, query: &Vector, k: usize) -> Result<Vec<SimilarityHit>> {
        let hits = self.scores(query, k)?;
        Ok(select(hits, k, |a, b| {
            a.score.total_cmp(&b.score).then(a.example_id.cmp(&b.example_id))
        }))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.fingerprint.len() as u32).to_le_bytes())?;
        w.write_all(self.fingerprint.as_bytes())?;
        for &id in &self.ids {
            w.write_all(&(id as u64).to_le_bytes())?;
        }
        for &c in &self.data {
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.fingerprint.len() + self.ids.len() * 8 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::IndexFormat("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = usize::try_from(read_u64(&mut r)?)
            .map_err(|_| Error::IndexFormat("count overflows".into()))?;
        let fp_len = read_u32(&mut r)? as usize;
        if dim == 0 || r.len() < fp_len {
            return Err(Error::IndexFormat("truncated header".into()));
        }
        let fingerprint = std::str::from_utf8(&r[..fp_len])
            .map_err(|_| Error::IndexFormat("fingerprint is not UTF-8".into()))?
            .to_string();
        r = &r[fp_len..];
        let expected = count
            .checked_mul(8 + 4 * dim)
            .ok_or_else(|| Error::IndexFormat("size overflows".into()))?;
        if r.len() != expected {
            return Err(Error::IndexFormat(format!(
                "expected {expected} payload bytes, found {}",
                r.len()
            )));
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(read_u64(&mut r)? as usize);
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::IndexFormat("ids are not strictly ascending".into()));
        }
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            let c = f32::from_le_bytes(read_array(&mut r)?);
            if !c.is_finite() {
                return Err(Error::IndexFormat("non-finite component".into()));
            }
            data.push(c);
        }
        Ok(EmbeddingIndex { dim, fingerprint, ids, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        EmbeddingIndex::from_bytes(&bytes)
    }

    /// Reads only the dimension from an index file header.
    pub fn peek_dim(path: &Path) -> Result<usize> {
        let mut header = [0u8; 16];
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        if &header[..8] != MAGIC {
            return Err(Error::IndexFormat("bad magic".into()));
        }
        Ok(u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize)
    }
}

fn select(
    mut hits: Vec<SimilarityHit>,
    k: usize,
    cmp: impl Fn(&SimilarityHit, &SimilarityHit) -> Ordering,
) -> Vec<SimilarityHit> {
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, &cmp);
        hits.truncate(k);
    }
    hits.sort_unstable_by(&cmp);
    hits
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::IndexFormat("truncated file".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}
