//! Experiment grid, macro-F1 and reports.
//!
//! A grid is strategy × source × target with one macro-F1 per seed in every
//! cell. Cells run on a bounded rayon pool; inside a cell test examples are
//! scored in parallel as well, and results are gathered back in input order
//! so reports do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aligner::{AlignerCatalog, HttpSpanFiller, MockSpanFiller, SpanFiller, DEFAULT_MASK_TOKEN};
use crate::corpus::{derive_seed, sample_indices, Dataset, LabelSpace, LabeledExample, LanguageCode, Split};
use crate::embedding::{embed_batch, BuildOptions, Embedder, EmbeddingIndex, HashingEmbedder, HttpEmbedder, PrecomputedEmbedder, Vector};
use crate::error::{Error, Result};
use crate::inference::{predict_label, CachedScorer, HttpScorer, Lexicon, MockScorer, Scorer};
use crate::prompt::{build_prompt, enforce_budget, PromptConfig, PromptDeps, PromptPlan, Strategy, VerbalizerRegistry, WordCountCounter};
use crate::transport::EndpointConfig;

/// Seeds used when a config names none.
pub const DEFAULT_SEEDS: [u64; 5] = [32, 5, 232, 100, 42];
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_MAX_TOKENS: usize = 1024;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    #[default]
    Hash,
    Keyword,
}

impl FromStr for MockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(MockKind::Hash),
            "keyword" => Ok(MockKind::Keyword),
            other => Err(Error::InvalidArgument(format!("unknown mock scorer `{other}` (hash, keyword)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    Mock {
        #[serde(default)]
        mode: MockKind,
        #[serde(default)]
        key: String,
        /// Cue words per label id, for keyword mode.
        #[serde(default)]
        lexicon: BTreeMap<String, Vec<String>>,
    },
    Http {
        endpoint: EndpointConfig,
    },
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig::Mock { mode: MockKind::Hash, key: String::new(), lexicon: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Precomputed {
        path: PathBuf,
    },
    Http {
        endpoint: EndpointConfig,
        #[serde(default)]
        model: Option<String>,
    },
}

fn default_dim() -> usize {
    256
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: default_dim() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpanFillConfig {
    Mock {
        span: String,
    },
    Http {
        endpoint: EndpointConfig,
        #[serde(default = "default_mask")]
        mask_token: String,
    },
}

fn default_mask() -> String {
    DEFAULT_MASK_TOKEN.to_string()
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

fn default_workers() -> usize {
    4
}

/// A grid definition. Relative paths are resolved against the config file's
/// directory by [`ExperimentConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset descriptor.
    pub dataset: PathBuf,
    pub strategies: Vec<Strategy>,
    pub sources: Vec<LanguageCode>,
    pub targets: Vec<LanguageCode>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Stratified test subsample size per target language.
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub spanfill: Option<SpanFillConfig>,
    /// Aligner catalog; the built-in one when absent.
    #[serde(default)]
    pub aligners: Option<PathBuf>,
    /// Verbalizer templates; the built-in ones when absent.
    #[serde(default)]
    pub verbalizers: Option<PathBuf>,
    /// Directory of prebuilt index files named by [`index_file_name`].
    #[serde(default)]
    pub index_dir: Option<PathBuf>,
    /// Score replay cache.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Serve scores from the cache only.
    #[serde(default)]
    pub offline: bool,
    /// Output directory for reports and audit trails.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a TOML config, applies `key=value` overrides in order (dotted
    /// keys address nested tables; the last assignment wins) and resolves
    /// relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        ExperimentConfig::from_toml_str(&raw, overrides, base).map_err(|e| match e {
            Error::InvalidArgument(message) => Error::config(path, message),
            other => other,
        })
    }

    pub fn from_toml_str(raw: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(raw).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for pair in overrides {
            apply_override(&mut table, pair)?;
        }
        let mut config: ExperimentConfig =
            table.try_into().map_err(|e: toml::de::Error| Error::InvalidArgument(e.to_string()))?;
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        for p in [&mut self.aligners, &mut self.verbalizers, &mut self.index_dir, &mut self.cache, &mut self.out]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let EmbedderConfig::Precomputed { path } = &mut self.embedder {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty");
        }
        if self.strategies.is_empty() {
            return fail("strategies must not be empty");
        }
        if self.sources.is_empty() || self.targets.is_empty() {
            return fail("sources and targets must not be empty");
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be positive");
        }
        if self.workers == 0 {
            return fail("workers must be positive");
        }
        if self.test_subset == Some(0) {
            return fail("test_subset must be positive");
        }
        Ok(())
    }
}

/// Applies one `dotted.key=value` assignment. The value is read as a TOML
/// value when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, pair: &str) -> Result<()> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{pair}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("bad override key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("override `{key}`: `{part}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// File name for the index over `lang`'s training examples of `task`.
pub fn index_file_name(task: &str, lang: &LanguageCode) -> String {
    format!("{task}-{lang}.idx")
}

/// Macro-averaged F1 over the labels of `space` that occur among the golds
/// or the predictions. Such a label whose precision and recall are both zero
/// (or undefined) scores 0; labels occurring in neither are left out.
pub fn macro_f1<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G], space: &LabelSpace) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::InvalidArgument("macro-F1 of an empty set".into()));
    }
    let n = space.len();
    let index = |label: &str| {
        space.index_of(label).ok_or_else(|| Error::UnknownLabel { label: label.to_string(), lang: space.lang().to_string() })
    };
    let (mut tp, mut fp, mut fn_) = (vec![0u64; n], vec![0u64; n], vec![0u64; n]);
    for (p, g) in predictions.iter().zip(golds) {
        let (p, g) = (index(p.as_ref())?, index(g.as_ref())?);
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let present: Vec<usize> = (0..n).filter(|&i| tp[i] + fp[i] + fn_[i] > 0).collect();
    let total: f64 = present
        .iter()
        .map(|&i| {
            let precision = ratio(tp[i], tp[i] + fp[i]);
            let recall = ratio(tp[i], tp[i] + fn_[i]);
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) }
        })
        .sum();
    Ok(total / present.len() as f64)
}

/// Up to `n` examples drawn per label in proportion to label frequency
/// (largest remainder), returned in id order.
pub fn stratified_subset<'a>(
    examples: &[&'a LabeledExample],
    space: &LabelSpace,
    n: usize,
    seed: u64,
) -> Result<Vec<&'a LabeledExample>> {
    if n >= examples.len() {
        return Ok(examples.to_vec());
    }
    let groups: Vec<Vec<&LabeledExample>> = space
        .labels()
        .iter()
        .map(|label| examples.iter().copied().filter(|e| e.label == label.id).collect())
        .collect();
    let total = examples.len();
    let mut quotas: Vec<usize> = groups.iter().map(|g| g.len() * n / total).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse((groups[i].len() * n) % total), i));
    let mut left = n - quotas.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if quotas[i] < groups[i].len() {
            quotas[i] += 1;
            left -= 1;
        }
    }
    let mut picked = Vec::with_capacity(n);
    for (i, group) in groups.iter().enumerate() {
        for j in sample_indices(group.len(), quotas[i], derive_seed(seed, i as u64))? {
            picked.push(group[j]);
        }
    }
    picked.sort_by_key(|e| e.id);
    Ok(picked)
}

/// Live handles built from a config.
pub struct Resources {
    pub dataset: Dataset,
    pub verbalizers: VerbalizerRegistry,
    pub catalog: AlignerCatalog,
    pub embedder: Box<dyn Embedder>,
    pub spanfill: Option<Box<dyn SpanFiller>>,
    pub scorer: CachedScorer,
}

impl Resources {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let dataset = Dataset::open(&config.dataset)?;
        Resources::with_dataset(config, dataset)
    }

    /// Like [`Resources::from_config`] with an already loaded dataset.
    pub fn with_dataset(config: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        let verbalizers = match &config.verbalizers {
            Some(path) => VerbalizerRegistry::from_file(path)?,
            None => VerbalizerRegistry::builtin(),
        };
        let catalog = match &config.aligners {
            Some(path) => AlignerCatalog::from_file(path)?,
            None => AlignerCatalog::builtin(),
        };
        let embedder: Box<dyn Embedder> = match &config.embedder {
            EmbedderConfig::Hashing { dim } => Box::new(HashingEmbedder::new(*dim)),
            EmbedderConfig::Precomputed { path } => Box::new(PrecomputedEmbedder::from_jsonl(path)?),
            EmbedderConfig::Http { endpoint, model } => Box::new(HttpEmbedder::new(endpoint.clone(), model.clone())),
        };
        let spanfill: Option<Box<dyn SpanFiller>> = match &config.spanfill {
            None => None,
            Some(SpanFillConfig::Mock { span }) => Some(Box::new(MockSpanFiller::new(span.clone()))),
            Some(SpanFillConfig::Http { endpoint, mask_token }) => {
                Some(Box::new(HttpSpanFiller::new(endpoint.clone(), mask_token.clone())))
            }
        };
        let inner: Box<dyn Scorer> = match &config.scorer {
            ScorerConfig::Mock { mode: MockKind::Hash, key, .. } => Box::new(MockScorer::hash(key.clone())),
            ScorerConfig::Mock { mode: MockKind::Keyword, lexicon, .. } => {
                let first = dataset
                    .languages
                    .first()
                    .ok_or_else(|| Error::Plan("dataset declares no languages".into()))?;
                let space = dataset.label_space(first)?;
                for id in lexicon.keys() {
                    if space.index_of(id).is_none() {
                        return Err(Error::Plan(format!("lexicon names unknown label `{id}`")));
                    }
                }
                let lex = Lexicon::new(space.labels().iter().map(|l| lexicon.get(&l.id).cloned().unwrap_or_default()));
                Box::new(MockScorer::keyword(lex).with_separator(config.prompt.separator.clone()))
            }
            ScorerConfig::Http { endpoint } => Box::new(HttpScorer::new(endpoint.clone())),
        };
        let mut scorer = CachedScorer::new(Some(inner), config.offline);
        if let Some(path) = &config.cache {
            scorer = scorer.with_file(path)?;
        } else if config.offline {
            return Err(Error::Plan("offline mode needs a cache file".into()));
        }
        Ok(Resources { dataset, verbalizers, catalog, embedder, spanfill, scorer })
    }

    /// Loads the index for `lang` from `index_dir` if present, otherwise
    /// embeds the language's training examples.
    pub fn index_for(&self, config: &ExperimentConfig, lang: &LanguageCode) -> Result<EmbeddingIndex> {
        if let Some(dir) = &config.index_dir {
            let path = dir.join(index_file_name(&self.dataset.name, lang));
            if path.exists() {
                let index = EmbeddingIndex::load(&path)?;
                let expected = self.embedder.fingerprint();
                if index.fingerprint() != expected {
                    return Err(Error::Plan(format!(
                        "{} was built with `{}`, the configured embedder is `{expected}`",
                        path.display(),
                        index.fingerprint()
                    )));
                }
                return Ok(index);
            }
        }
        let examples: Vec<LabeledExample> =
            self.dataset.examples_in(Split::Train, lang).into_iter().cloned().collect();
        EmbeddingIndex::build(&examples, self.embedder.as_ref(), BuildOptions::default())
    }
}

/// One scored test example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub strategy: Strategy,
    pub source: LanguageCode,
    pub target: LanguageCode,
    pub seed: u64,
    pub test_id: usize,
    pub prompt_sha256: String,
    pub demo_ids: Vec<usize>,
    pub dropped: usize,
    pub token_count: usize,
    pub candidates: Vec<String>,
    pub log_probs: Vec<f64>,
    pub gold: String,
    pub predicted: String,
    pub scorer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub source: LanguageCode,
    pub target: LanguageCode,
    /// Macro-F1 per seed, in config seed order.
    pub per_seed: Vec<f64>,
    pub mean: Option<f64>,
    pub examples: usize,
    /// Demonstrations removed to meet the token budget, over all seeds.
    pub dropped_demos: usize,
    /// Audit trail path relative to the output directory.
    pub audit: Option<PathBuf>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageCell {
    pub strategy: Strategy,
    pub target: LanguageCode,
    /// Mean over the sources whose cell succeeded.
    pub mean: Option<f64>,
    pub sources: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub test_subset: Option<usize>,
    pub strategies: Vec<Strategy>,
    pub sources: Vec<LanguageCode>,
    pub targets: Vec<LanguageCode>,
    pub cells: Vec<CellResult>,
    pub averages: Vec<AverageCell>,
}

impl ExperimentReport {
    pub fn cell(&self, strategy: &Strategy, source: &LanguageCode, target: &LanguageCode) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| &c.strategy == strategy && &c.source == source && &c.target == target)
    }

    pub fn average(&self, strategy: &Strategy, target: &LanguageCode) -> Option<&AverageCell> {
        self.averages.iter().find(|a| &a.strategy == strategy && &a.target == target)
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        Ok(serde_json::from_str(raw)?)
    }
}

/// Runtime knobs that are not part of the experiment definition.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where audit trails go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Set to stop starting new work; unfinished cells are marked failed.
    pub interrupt: Option<Arc<AtomicBool>>,
}

struct Cell {
    strategy: Strategy,
    source: LanguageCode,
    target: LanguageCode,
}

struct Plan<'a> {
    cells: Vec<Cell>,
    tests: BTreeMap<LanguageCode, Vec<&'a LabeledExample>>,
    indexes: BTreeMap<LanguageCode, EmbeddingIndex>,
    queries: BTreeMap<LanguageCode, BTreeMap<usize, Vector>>,
}

fn ordered(dataset: &Dataset, langs: &[LanguageCode]) -> Result<Vec<LanguageCode>> {
    let mut out: Vec<LanguageCode> = Vec::new();
    for lang in langs {
        if !dataset.languages.contains(lang) {
            return Err(Error::UnknownLanguage(lang.to_string()));
        }
        if !out.contains(lang) {
            out.push(lang.clone());
        }
    }
    out.sort_by_key(|l| dataset.languages.iter().position(|d| d == l));
    Ok(out)
}

fn plan<'a>(config: &ExperimentConfig, res: &'a Resources) -> Result<Plan<'a>> {
    config.validate()?;
    let dataset = &res.dataset;
    let sources = ordered(dataset, &config.sources)?;
    let targets = ordered(dataset, &config.targets)?;
    let mut cells = Vec::new();
    for strategy in &config.strategies {
        for source in &sources {
            for target in &targets {
                if source != target {
                    cells.push(Cell { strategy: strategy.clone(), source: source.clone(), target: target.clone() });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Plan("the grid has no cross-lingual cells".into()));
    }

    let needs_index: Vec<&LanguageCode> = sources
        .iter()
        .filter(|s| cells.iter().any(|c| &c.source == *s && c.strategy.kind.uses_index(&config.prompt)))
        .collect();
    let mut indexes = BTreeMap::new();
    for source in needs_index {
        indexes.insert(source.clone(), res.index_for(config, source)?);
    }

    let mut tests = BTreeMap::new();
    let mut queries = BTreeMap::new();
    for target in &targets {
        let all = dataset.examples_in(Split::Test, target);
        let chosen = match config.test_subset {
            Some(n) => stratified_subset(&all, dataset.label_space(target)?, n, config.subset_seed)?,
            None => all,
        };
        if chosen.is_empty() {
            return Err(Error::Plan(format!("no test examples for {target}")));
        }
        if !indexes.is_empty() && cells.iter().any(|c| &c.target == target && c.strategy.kind.uses_index(&config.prompt)) {
            let mut vectors = BTreeMap::new();
            for chunk in chosen.chunks(BuildOptions::default().batch_size) {
                let texts: Vec<&str> = chunk.iter().map(|e| e.text.as_str()).collect();
                for (ex, v) in chunk.iter().zip(embed_batch(res.embedder.as_ref(), &texts)?) {
                    vectors.insert(ex.id, v.normalized()?);
                }
            }
            queries.insert(target.clone(), vectors);
        }
        tests.insert(target.clone(), chosen);
    }

    for cell in &cells {
        let deps = deps_for(config, res, &indexes, &queries, cell);
        deps.check(&cell.strategy, &cell.source, &cell.target).map_err(|e| {
            Error::Plan(format!("{} {}->{} ({}): {e}", dataset.name, cell.source, cell.target, cell.strategy))
        })?;
        let available = dataset.count(Split::Train, &cell.source);
        if config.k > available {
            return Err(Error::Plan(format!(
                "k = {} but {} has only {available} training examples",
                config.k, cell.source
            )));
        }
        let (src, tgt) = (dataset.label_space(&cell.source)?, dataset.label_space(&cell.target)?);
        if src.len() != tgt.len() {
            return Err(Error::LabelSpaceMismatch { left: src.len(), right: tgt.len() });
        }
    }
    Ok(Plan { cells, tests, indexes, queries })
}

fn deps_for<'a>(
    config: &'a ExperimentConfig,
    res: &'a Resources,
    indexes: &'a BTreeMap<LanguageCode, EmbeddingIndex>,
    queries: &'a BTreeMap<LanguageCode, BTreeMap<usize, Vector>>,
    cell: &Cell,
) -> PromptDeps<'a> {
    let mut deps = PromptDeps::new(&res.dataset, &res.verbalizers, &config.prompt);
    deps.catalog = Some(&res.catalog);
    deps.index = indexes.get(&cell.source);
    deps.embedder = Some(res.embedder.as_ref());
    deps.spanfill = res.spanfill.as_deref();
    deps.query_vectors = queries.get(&cell.target);
    deps
}

fn audit_name(cell: &Cell) -> PathBuf {
    let strategy: String =
        cell.strategy.to_string().chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect();
    PathBuf::from("audit").join(format!("{strategy}.{}-{}.jsonl", cell.source, cell.target))
}

fn score_example(
    config: &ExperimentConfig,
    res: &Resources,
    deps: &PromptDeps<'_>,
    cell: &Cell,
    seed: u64,
    test: &LabeledExample,
) -> Result<AuditRecord> {
    let plan = build_prompt(deps, &cell.strategy, &cell.source, test, config.k, derive_seed(seed, test.id as u64))?;
    let policy = plan.default_budget_policy();
    let plan = enforce_budget(plan, config.max_tokens, &WordCountCounter, policy)?;
    let target_space = res.dataset.label_space(&cell.target)?;
    let space = if cell.strategy.predicts_in_source_space() {
        res.dataset.label_space(&cell.source)?
    } else {
        target_space
    };
    let prediction = predict_label(&res.scorer, &plan, space)?;
    Ok(AuditRecord {
        strategy: cell.strategy.clone(),
        source: cell.source.clone(),
        target: cell.target.clone(),
        seed,
        test_id: test.id,
        prompt_sha256: Sha256::digest(plan.final_text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect(),
        demo_ids: plan.demo_ids(),
        dropped: plan.dropped,
        token_count: plan.token_count,
        candidates: space.verbalizations(),
        log_probs: prediction.log_probs,
        gold: test.label.clone(),
        // Positional, so predictions in the source space land on target ids.
        predicted: target_space.labels()[prediction.index].id.clone(),
        scorer: prediction.scorer_fingerprint,
    })
}

fn run_cell(
    config: &ExperimentConfig,
    res: &Resources,
    plan: &Plan<'_>,
    cell: &Cell,
    options: &RunOptions,
) -> Result<(Vec<f64>, usize, usize, Option<PathBuf>)> {
    let deps = deps_for(config, res, &plan.indexes, &plan.queries, cell);
    let tests = &plan.tests[&cell.target];
    let space = res.dataset.label_space(&cell.target)?;
    let stop = || options.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst));
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    let mut records = Vec::new();
    for &seed in &config.seeds {
        let batch: Vec<AuditRecord> = tests
            .par_iter()
            .map(|test| {
                if stop() {
                    return Err(Error::Plan("interrupted".into()));
                }
                score_example(config, res, &deps, cell, seed, test)
            })
            .collect::<Result<_>>()?;
        let predicted: Vec<&str> = batch.iter().map(|r| r.predicted.as_str()).collect();
        let gold: Vec<&str> = batch.iter().map(|r| r.gold.as_str()).collect();
        per_seed.push(macro_f1(&predicted, &gold, space)?);
        records.extend(batch);
    }
    let dropped = records.iter().map(|r| r.dropped).sum();
    let audit = match &options.out_dir {
        Some(dir) => {
            let name = audit_name(cell);
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut body = Vec::new();
            for record in &records {
                serde_json::to_writer(&mut body, record)?;
                body.push(b'\n');
            }
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Some(name)
        }
        None => None,
    };
    Ok((per_seed, tests.len(), dropped, audit))
}

/// Runs the whole grid. Plan-time problems (unknown languages, missing
/// aligners, verbalizers, indexes) fail before anything is scored; later
/// errors only fail their own cell.
pub fn run_experiment(config: &ExperimentConfig, res: &Resources, options: &RunOptions) -> Result<ExperimentReport> {
    let plan = plan(config, res)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Plan(e.to_string()))?;
    let cells: Vec<CellResult> = pool.install(|| {
        plan.cells
            .par_iter()
            .map(|cell| {
                let outcome = run_cell(config, res, &plan, cell, options);
                let mut result = CellResult {
                    strategy: cell.strategy.clone(),
                    source: cell.source.clone(),
                    target: cell.target.clone(),
                    per_seed: Vec::new(),
                    mean: None,
                    examples: 0,
                    dropped_demos: 0,
                    audit: None,
                    error: None,
                };
                match outcome {
                    Ok((per_seed, examples, dropped, audit)) => {
                        result.mean = Some(per_seed.iter().sum::<f64>() / per_seed.len() as f64);
                        result.per_seed = per_seed;
                        result.examples = examples;
                        result.dropped_demos = dropped;
                        result.audit = audit;
                        log::info!(
                            "{} {}->{}: macro-F1 {:.3}",
                            cell.strategy,
                            cell.source,
                            cell.target,
                            result.mean.unwrap_or(f64::NAN)
                        );
                    }
                    Err(e) => {
                        log::warn!("{} {}->{} failed: {e}", cell.strategy, cell.source, cell.target);
                        result.error = Some(e.to_string());
                    }
                }
                result
            })
            .collect()
    });

    let mut strategies: Vec<Strategy> = Vec::new();
    for s in &config.strategies {
        if !strategies.contains(s) {
            strategies.push(s.clone());
        }
    }
    let sources = ordered(&res.dataset, &config.sources)?;
    let targets = ordered(&res.dataset, &config.targets)?;
    let averages = strategies
        .iter()
        .flat_map(|strategy| {
            let cells = &cells;
            targets.iter().map(move |target| {
                let means: Vec<f64> = cells
                    .iter()
                    .filter(|c| &c.strategy == strategy && &c.target == target)
                    .filter_map(|c| c.mean)
                    .collect();
                AverageCell {
                    strategy: strategy.clone(),
                    target: target.clone(),
                    mean: (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64),
                    sources: means.len(),
                }
            })
        })
        .collect();
    Ok(ExperimentReport {
        task: res.dataset.name.clone(),
        k: config.k,
        seeds: config.seeds.clone(),
        test_subset: config.test_subset,
        strategies,
        sources,
        targets,
        cells,
        averages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Delimited,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Delimited => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" | "delimited" => Ok(ReportFormat::Delimited),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown report format `{other}` (text, csv, json)"))),
        }
    }
}

const FAILED: &str = "—";

fn pad(s: &str, width: usize) -> String {
    let len = s.chars().count();
    format!("{}{s}", " ".repeat(width.saturating_sub(len)))
}

fn render_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(
        out,
        "task {} | k = {} | seeds {} | macro-F1, mean over {} seed(s)",
        report.task,
        report.k,
        seeds.join(", "),
        report.seeds.len()
    );
    let mut footnotes = Vec::new();
    const W: usize = 8;
    for strategy in &report.strategies {
        let _ = writeln!(out, "\n[{strategy}]");
        let mut header = format!("{:<10}", "src\\tgt");
        for t in &report.targets {
            header.push_str(&pad(t.as_str(), W));
        }
        let _ = writeln!(out, "{}", header.trim_end());
        for source in &report.sources {
            let mut row = format!("{:<10}", source.as_str());
            for target in &report.targets {
                let text = match report.cell(strategy, source, target) {
                    None => String::new(),
                    Some(cell) => match (cell.mean, &cell.error) {
                        (Some(m), _) => format!("{m:.3}"),
                        (None, error) => {
                            footnotes.push(format!(
                                "{strategy} {source}->{target}: {}",
                                error.as_deref().unwrap_or("no result")
                            ));
                            format!("{FAILED}[{}]", footnotes.len())
                        }
                    },
                };
                row.push_str(&pad(&text, W));
            }
            let _ = writeln!(out, "{}", row.trim_end());
        }
        let mut avg = format!("{:<10}", "AVG");
        for target in &report.targets {
            let text = match report.average(strategy, target).and_then(|a| a.mean) {
                Some(m) => format!("{m:.3}"),
                None => FAILED.to_string(),
            };
            avg.push_str(&pad(&text, W));
        }
        let _ = writeln!(out, "{}", avg.trim_end());
    }
    if !footnotes.is_empty() {
        let _ = writeln!(out, "\n{FAILED} failed cells:");
        for (i, note) in footnotes.iter().enumerate() {
            let _ = writeln!(out, "  [{}] {note}", i + 1);
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("strategy,source,target");
    for seed in &report.seeds {
        let _ = write!(out, ",seed_{seed}");
    }
    out.push_str(",mean,status\n");
    let blank_seeds = ",".repeat(report.seeds.len());
    for strategy in &report.strategies {
        for source in &report.sources {
            for target in &report.targets {
                let Some(cell) = report.cell(strategy, source, target) else { continue };
                let _ = write!(out, "{},{source},{target}", csv_field(&strategy.to_string()));
                match cell.mean {
                    Some(mean) => {
                        for v in &cell.per_seed {
                            let _ = write!(out, ",{v:.3}");
                        }
                        let _ = writeln!(out, ",{mean:.3},ok");
                    }
                    None => {
                        let status = format!("failed: {}", cell.error.as_deref().unwrap_or(""));
                        let _ = writeln!(out, "{blank_seeds},,{}", csv_field(&status));
                    }
                }
            }
        }
        for target in &report.targets {
            let mean = report.average(strategy, target).and_then(|a| a.mean);
            let _ = write!(out, "{},AVG,{target}{blank_seeds}", csv_field(&strategy.to_string()));
            match mean {
                Some(m) => {
                    let _ = writeln!(out, ",{m:.3},avg");
                }
                None => {
                    let _ = writeln!(out, ",,avg");
                }
            }
        }
    }
    out
}

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(report),
        ReportFormat::Delimited => render_csv(report),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(render_report(report, format).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `report.txt`, `report.csv` and `report.json` into `dir`.
pub fn emit_all(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    [ReportFormat::Text, ReportFormat::Delimited, ReportFormat::Json]
        .into_iter()
        .map(|format| {
            let path = dir.join(format!("report.{}", format.extension()));
            emit_report(report, format, &path)?;
            Ok(path)
        })
        .collect()
}

/// Builds the budgeted prompt for one test example outside a grid run, with
/// the resources a run would use. `source` defaults to the config's first
/// source language.
pub fn single_prompt(
    config: &ExperimentConfig,
    res: &Resources,
    strategy: &Strategy,
    test_id: usize,
    source: Option<&LanguageCode>,
    seed: u64,
) -> Result<PromptPlan> {
    let test = res
        .dataset
        .example(Split::Test, test_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no test example with id {test_id}")))?;
    let source = match source {
        Some(s) => s.clone(),
        None => config.sources.first().cloned().ok_or_else(|| Error::InvalidArgument("no source language".into()))?,
    };
    let index = if strategy.kind.uses_index(&config.prompt) { Some(res.index_for(config, &source)?) } else { None };
    let mut deps = PromptDeps::new(&res.dataset, &res.verbalizers, &config.prompt);
    deps.catalog = Some(&res.catalog);
    deps.index = index.as_ref();
    deps.embedder = Some(res.embedder.as_ref());
    deps.spanfill = res.spanfill.as_deref();
    deps.check(strategy, &source, &test.lang)?;
    let plan = build_prompt(&deps, strategy, &source, test, config.k, seed)?;
    let policy = plan.default_budget_policy();
    enforce_budget(plan, config.max_tokens, &WordCountCounter, policy)
}
