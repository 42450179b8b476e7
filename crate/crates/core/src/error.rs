use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid config: {message}")]
    Config { path: PathBuf, message: String },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    #[error("label `{label}` is not in the {lang} label space")]
    UnknownLabel { label: String, lang: String },

    #[error("label spaces differ in size ({left} vs {right})")]
    LabelSpaceMismatch { left: usize, right: usize },

    #[error("requested {requested} examples but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("non-finite vector component")]
    NonFinite,

    #[error("k = {k} is out of range for an index of {size} entries")]
    KOutOfRange { k: usize, size: usize },

    #[error("embedding failed for example {id}: {message}")]
    EmbeddingFailed { id: usize, message: String },

    #[error("index file: {0}")]
    IndexFormat(String),

    #[error("no aligner for task `{task}` from {src} to {tgt}")]
    MissingAligner { task: String, src: String, tgt: String },

    #[error("unresolved placeholder {{{0}}} in aligner template")]
    UnresolvedPlaceholder(String),

    #[error("span-fill model returned an empty span")]
    DegenerateSpan,

    #[error("no verbalizer for task `{task}` in language {lang}")]
    MissingVerbalizer { task: String, lang: String },

    #[error("missing dependency for strategy `{strategy}`: {dependency}")]
    MissingDependency { strategy: String, dependency: String },

    #[error(
        "prompt for test example {id} needs {tokens} tokens without demonstrations, \
         budget is {budget}"
    )]
    Unrepresentable { id: usize, tokens: usize, budget: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("offline mode: no cached response for request {0}")]
    CacheMiss(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    /// Whether retrying the same request might succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
