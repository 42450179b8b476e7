//! Label scoring.
//!
//! A scorer returns one log-probability per candidate verbalization given the
//! prompt. Multi-token verbalizations are scored as a whole (the sum of their
//! token log-probabilities), which is recorded in the scorer fingerprint.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::LabelSpace;
use crate::error::{Error, Result};
use crate::prompt::{PromptPlan, DEFAULT_SEPARATOR};
use crate::transport::{EndpointConfig, JsonClient};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub candidates: Vec<String>,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>, candidates: Vec<String>) -> Self {
        ScoreRequest { prompt: prompt.into(), candidates }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::InvalidArgument("candidate set is empty".into()));
        }
        let distinct: BTreeSet<&String> = self.candidates.iter().collect();
        if distinct.len() != self.candidates.len() {
            return Err(Error::InvalidArgument("candidates must be distinct".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex(&Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub log_probs: Vec<f64>,
    pub scorer_fingerprint: String,
}

pub trait Scorer: Send + Sync {
    fn fingerprint(&self) -> String;
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse>;
}

/// Scores `request` and checks that the reply has one finite value per
/// candidate.
pub fn score_candidates(scorer: &dyn Scorer, request: &ScoreRequest) -> Result<ScoreResponse> {
    request.validate()?;
    let response = scorer.score(request)?;
    if response.log_probs.len() != request.candidates.len() {
        return Err(Error::Protocol(format!(
            "expected {} log-probabilities, got {}",
            request.candidates.len(),
            response.log_probs.len()
        )));
    }
    if response.log_probs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Protocol("non-finite log-probability".into()));
    }
    Ok(response)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label_id: String,
    pub verbalization: String,
    pub index: usize,
    pub log_prob: f64,
    pub log_probs: Vec<f64>,
    pub scorer_fingerprint: String,
}

/// Argmax over `response`, breaking ties toward the lower index.
pub fn pick(space: &LabelSpace, response: ScoreResponse) -> Result<Prediction> {
    if response.log_probs.len() != space.len() {
        return Err(Error::Protocol(format!(
            "expected {} log-probabilities, got {}",
            space.len(),
            response.log_probs.len()
        )));
    }
    let mut best = 0;
    for (i, &lp) in response.log_probs.iter().enumerate() {
        if lp > response.log_probs[best] {
            best = i;
        }
    }
    let label = &space.labels()[best];
    Ok(Prediction {
        label_id: label.id.clone(),
        verbalization: label.verbalization.clone(),
        index: best,
        log_prob: response.log_probs[best],
        log_probs: response.log_probs,
        scorer_fingerprint: response.scorer_fingerprint,
    })
}

/// Predicts over `space`, the label space the plan's prompt asks for.
pub fn predict_label(scorer: &dyn Scorer, plan: &PromptPlan, space: &LabelSpace) -> Result<Prediction> {
    let request = ScoreRequest::new(plan.final_text.clone(), space.verbalizations());
    pick(space, score_candidates(scorer, &request)?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unit_hash(parts: &[&str]) -> f64 {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - log_sum).collect()
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Cue words per candidate position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub terms: Vec<BTreeSet<String>>,
}

impl Lexicon {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = Vec<S>>,
        S: AsRef<str>,
    {
        Lexicon {
            terms: terms
                .into_iter()
                .map(|words| words.iter().map(|w| w.as_ref().to_lowercase()).collect())
                .collect(),
        }
    }
}

/// Weight of a cue word that also appears in the demonstrations, relative
/// to one that does not.
pub const CORROBORATED_WEIGHT: f64 = 1.0;
pub const UNCORROBORATED_WEIGHT: f64 = 0.25;
const JITTER: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockMode {
    /// Pseudo-random scores from a hash of the prompt and candidate.
    Hash,
    /// Counts cue words in the test segment, weighting those that also
    /// occur in the preceding context more heavily.
    Keyword(Lexicon),
}

/// Deterministic offline scorer.
#[derive(Debug, Clone)]
pub struct MockScorer {
    mode: MockMode,
    key: String,
    separator: String,
}

impl MockScorer {
    pub fn hash(key: impl Into<String>) -> Self {
        MockScorer { mode: MockMode::Hash, key: key.into(), separator: DEFAULT_SEPARATOR.to_string() }
    }

    pub fn keyword(lexicon: Lexicon) -> Self {
        MockScorer { mode: MockMode::Keyword(lexicon), key: String::new(), separator: DEFAULT_SEPARATOR.to_string() }
    }

    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.separator = separator.into();
        self
    }

    /// Raw keyword score of candidate `index` before normalization.
    pub fn keyword_score(lexicon: &Lexicon, separator: &str, prompt: &str, index: usize) -> f64 {
        let (context, test) = match prompt.rfind(separator) {
            Some(at) => (&prompt[..at], &prompt[at + separator.len()..]),
            None => ("", prompt),
        };
        let Some(cues) = lexicon.terms.get(index) else { return 0.0 };
        let seen: BTreeSet<String> = tokenize(context).into_iter().collect();
        tokenize(test)
            .iter()
            .filter(|t| cues.contains(*t))
            .map(|t| if seen.contains(t) { CORROBORATED_WEIGHT } else { UNCORROBORATED_WEIGHT })
            .sum()
    }
}

impl Scorer for MockScorer {
    fn fingerprint(&self) -> String {
        match self.mode {
            MockMode::Hash => format!("mock-hash:{}", self.key),
            MockMode::Keyword(_) => "mock-keyword".to_string(),
        }
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        request.validate()?;
        let raw: Vec<f64> = request
            .candidates
            .iter()
            .enumerate()
            .map(|(i, cand)| {
                let noise = unit_hash(&[&self.key, &request.prompt, cand]);
                match &self.mode {
                    MockMode::Hash => 4.0 * noise,
                    MockMode::Keyword(lex) => {
                        MockScorer::keyword_score(lex, &self.separator, &request.prompt, i) + JITTER * noise
                    }
                }
            })
            .collect();
        Ok(ScoreResponse { log_probs: log_softmax(&raw), scorer_fingerprint: self.fingerprint() })
    }
}

#[derive(Serialize, Deserialize)]
struct WireResponse {
    log_probs: Vec<f64>,
    #[serde(default)]
    model: Option<String>,
}

/// Client for a `POST /score` endpoint taking `{"prompt", "candidates"}`
/// and answering `{"log_probs", "model"}`.
#[derive(Debug)]
pub struct HttpScorer {
    client: JsonClient,
}

impl HttpScorer {
    pub fn new(config: EndpointConfig) -> Self {
        HttpScorer { client: JsonClient::new(config) }
    }

    pub fn requests_sent(&self) -> u64 {
        self.client.requests_sent()
    }
}

impl Scorer for HttpScorer {
    fn fingerprint(&self) -> String {
        format!("http:{};full-verbalization", self.client.base_url())
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let wire: WireResponse = self.client.post("/score", request)?;
        let model = wire.model.unwrap_or_else(|| self.client.base_url().to_string());
        Ok(ScoreResponse { log_probs: wire.log_probs, scorer_fingerprint: format!("{model};full-verbalization") })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    entries: BTreeMap<String, ScoreResponse>,
}

const CACHE_VERSION: u32 = 1;

/// Replay cache in front of an optional scorer. In offline mode a miss is an
/// error and the inner scorer is never called.
pub struct CachedScorer {
    inner: Option<Box<dyn Scorer>>,
    entries: Mutex<BTreeMap<String, ScoreResponse>>,
    path: Option<PathBuf>,
    offline: bool,
    forwarded: AtomicU64,
    hits: AtomicU64,
}

impl CachedScorer {
    pub fn new(inner: Option<Box<dyn Scorer>>, offline: bool) -> Self {
        CachedScorer {
            inner,
            entries: Mutex::new(BTreeMap::new()),
            path: None,
            offline,
            forwarded: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    /// Loads `path` if it exists; [`CachedScorer::save`] writes back to it.
    pub fn with_file(mut self, path: &Path) -> Result<Self> {
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: CacheFile = serde_json::from_str(&raw).map_err(|e| Error::config(path, e.to_string()))?;
            if file.version != CACHE_VERSION {
                return Err(Error::config(path, format!("unsupported cache version {}", file.version)));
            }
            *self.entries.get_mut().unwrap_or_else(|p| p.into_inner()) = file.entries;
        }
        self.path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let entries = self.entries.lock().unwrap_or_else(|p| p.into_inner()).clone();
        let body = serde_json::to_string_pretty(&CacheFile { version: CACHE_VERSION, entries })?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Requests passed through to the inner scorer.
    pub fn forwarded(&self) -> u64 {
        self.forwarded.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }
}

impl Scorer for CachedScorer {
    fn fingerprint(&self) -> String {
        match &self.inner {
            Some(inner) => inner.fingerprint(),
            None => "replay".to_string(),
        }
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let digest = request.digest();
        if let Some(hit) = self.entries.lock().unwrap_or_else(|p| p.into_inner()).get(&digest) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        let inner = match (&self.inner, self.offline) {
            (Some(inner), false) => inner,
            _ => return Err(Error::CacheMiss(digest)),
        };
        self.forwarded.fetch_add(1, Ordering::Relaxed);
        let response = inner.score(request)?;
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).insert(digest, response.clone());
        Ok(response)
    }
}
