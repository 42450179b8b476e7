//! Prompt assembly.
//!
//! A prompt is laid out as
//!
//! ```text
//! {sep} {demo_1}{sep} {demo_2} ... {sep} {demo_k}[{sep} {aligner}{sep}] {test}
//! ```
//!
//! where every demonstration reads `{input_prefix} {text} {label_prefix}
//! {label}` in the source language and the test input stops at the target
//! language's label prefix, the point where the model continues. Without an
//! aligner, `trailing_separator` decides whether a separator closes the
//! context before the test input.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aligner::{generate_auto_aligner, render_variant, AlignerCatalog, AlignerText, AlignerVariant, SpanFiller};
use crate::corpus::{sample_random, Dataset, LabelSpace, LabeledExample, LanguageCode, Split};
use crate::embedding::{Embedder, EmbeddingIndex, SimilarityHit, Vector};
use crate::error::{Error, Result};

const BUILTIN_VERBALIZERS: &str = include_str!("../assets/verbalizers.toml");

pub const DEFAULT_SEPARATOR: &str = "</s>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerTemplate {
    pub lang: LanguageCode,
    pub input_prefix: String,
    pub label_prefix: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Prefixes {
    input_prefix: String,
    label_prefix: String,
}

/// Verbalizer templates keyed by (task, language).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerbalizerRegistry {
    templates: BTreeMap<(String, LanguageCode), VerbalizerTemplate>,
}

impl VerbalizerRegistry {
    pub fn builtin() -> Self {
        VerbalizerRegistry::from_toml_str(BUILTIN_VERBALIZERS).expect("built-in verbalizers are valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        VerbalizerRegistry::from_toml_str(&raw).map_err(|e| Error::config(path, e.to_string()))
    }

    /// Parses `[task.lang]` tables with `input_prefix` and `label_prefix`.
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let tables: BTreeMap<String, BTreeMap<String, Prefixes>> =
            toml::from_str(raw).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut registry = VerbalizerRegistry::default();
        for (task, langs) in tables {
            for (lang, p) in langs {
                let lang: LanguageCode = lang.parse()?;
                registry.insert(
                    &task,
                    VerbalizerTemplate { lang, input_prefix: p.input_prefix, label_prefix: p.label_prefix },
                )?;
            }
        }
        Ok(registry)
    }

    pub fn insert(&mut self, task: &str, template: VerbalizerTemplate) -> Result<()> {
        if template.input_prefix.trim().is_empty() || template.label_prefix.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "verbalizer for {task}/{} has an empty prefix",
                template.lang
            )));
        }
        self.templates.insert((task.to_string(), template.lang.clone()), template);
        Ok(())
    }

    pub fn get(&self, task: &str, lang: &LanguageCode) -> Result<&VerbalizerTemplate> {
        self.templates.get(&(task.to_string(), lang.clone())).ok_or_else(|| Error::MissingVerbalizer {
            task: task.to_string(),
            lang: lang.to_string(),
        })
    }
}

/// `"{input_prefix} {text} {label_prefix} {verbalization}"`.
pub fn format_demonstration(
    example: &LabeledExample,
    template: &VerbalizerTemplate,
    space: &LabelSpace,
) -> Result<String> {
    if example.lang != template.lang {
        return Err(Error::InvalidArgument(format!(
            "example {} is {} but the verbalizer is {}",
            example.id, example.lang, template.lang
        )));
    }
    let word = space.verbalization(&example.label).ok_or_else(|| Error::UnknownLabel {
        label: example.label.clone(),
        lang: space.lang().to_string(),
    })?;
    Ok(format!("{} {} {} {}", template.input_prefix, example.text, template.label_prefix, word))
}

/// `"{input_prefix} {text} {label_prefix}"`, ending where the label goes.
pub fn format_test_input(text: &str, template: &VerbalizerTemplate) -> String {
    format!("{} {} {}", template.input_prefix, text, template.label_prefix)
}

/// Rendered demonstrations, each introduced by the separator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub blocks: Vec<String>,
    pub separator: String,
}

impl Context {
    pub fn text(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            out.push_str(&self.separator);
            out.push(' ');
            out.push_str(block);
        }
        out
    }
}

pub fn assemble_context(demos: &[String], separator: &str) -> Result<Context> {
    if separator.is_empty() {
        return Err(Error::InvalidArgument("separator must not be empty".into()));
    }
    Ok(Context { blocks: demos.to_vec(), separator: separator.to_string() })
}

/// Joins context, optional aligner and test rendering into the final prompt.
pub fn render_prompt(
    separator: &str,
    demos: &[String],
    aligner: Option<&str>,
    test_rendering: &str,
    trailing_separator: bool,
) -> String {
    let context = Context { blocks: demos.to_vec(), separator: separator.to_string() };
    let mut out = context.text();
    match aligner {
        Some(text) => {
            out.push_str(separator);
            out.push(' ');
            out.push_str(text);
            out.push_str(separator);
        }
        None if trailing_separator && !demos.is_empty() => out.push_str(separator),
        None => {}
    }
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(test_rendering);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Semantic,
    Dissimilar,
    TaskAligned,
    XInsta,
    AutoAligner,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Random,
        StrategyKind::Semantic,
        StrategyKind::Dissimilar,
        StrategyKind::TaskAligned,
        StrategyKind::XInsta,
        StrategyKind::AutoAligner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Semantic => "semantic",
            StrategyKind::Dissimilar => "dissimilar",
            StrategyKind::TaskAligned => "task_aligned",
            StrategyKind::XInsta => "x_insta",
            StrategyKind::AutoAligner => "auto_aligner",
        }
    }

    fn default_variant(self) -> AlignerVariant {
        match self {
            StrategyKind::TaskAligned | StrategyKind::XInsta | StrategyKind::AutoAligner => {
                AlignerVariant::Canonical
            }
            _ => AlignerVariant::None,
        }
    }

    /// Whether demonstrations come from the embedding index.
    pub fn uses_index(self, config: &PromptConfig) -> bool {
        match self {
            StrategyKind::Semantic | StrategyKind::Dissimilar | StrategyKind::XInsta => true,
            StrategyKind::AutoAligner => config.auto_aligner_semantic,
            _ => false,
        }
    }
}

/// A demonstration-selection method paired with an aligner variant, written
/// `kind` or `kind:variant` (e.g. `task_aligned:incorrect`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub variant: AlignerVariant,
}

impl Strategy {
    pub fn new(kind: StrategyKind, variant: AlignerVariant) -> Result<Self> {
        let ok = match kind {
            StrategyKind::TaskAligned | StrategyKind::XInsta => true,
            StrategyKind::AutoAligner => variant == AlignerVariant::Canonical,
            _ => !variant.yields_text(),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "strategy `{}` does not support aligner variant `{variant}`",
                kind.name()
            )));
        }
        Ok(Strategy { kind, variant })
    }

    pub fn plain(kind: StrategyKind) -> Self {
        Strategy { kind, variant: kind.default_variant() }
    }

    pub fn predicts_in_source_space(&self) -> bool {
        self.variant.predicts_in_source_space()
    }

    pub fn valid_names() -> String {
        let kinds: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
        format!(
            "{} (optionally `:variant`, variants: {})",
            kinds.join(", "),
            AlignerVariant::NAMES.join(", ")
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.variant == self.kind.default_variant() {
            f.write_str(self.kind.name())
        } else {
            write!(f, "{}:{}", self.kind.name(), self.variant)
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, variant) = match s.split_once(':') {
            Some((k, v)) => (k, Some(v)),
            None => (s, None),
        };
        let kind = StrategyKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == kind)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown strategy `{s}`; valid strategies: {}",
                    Strategy::valid_names()
                ))
            })?;
        match variant {
            Some(v) => Strategy::new(kind, v.parse()?),
            None => Ok(Strategy::plain(kind)),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub separator: String,
    /// Close the context with a separator when no aligner follows it.
    pub trailing_separator: bool,
    /// Select auto-aligner demonstrations by similarity instead of at random.
    pub auto_aligner_semantic: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            separator: DEFAULT_SEPARATOR.to_string(),
            trailing_separator: true,
            auto_aligner_semantic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub example: LabeledExample,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub rendered: String,
}

/// The test example without its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestInput {
    pub id: usize,
    pub text: String,
    pub lang: LanguageCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    /// Remove the demonstration with the lowest similarity score (the last
    /// one on ties); falls back to the last one when scores are absent.
    LowestSimilarityFirst,
    /// Remove the last demonstration.
    LastSelectedFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub strategy: Strategy,
    pub source: LanguageCode,
    pub target: LanguageCode,
    pub separator: String,
    pub trailing_separator: bool,
    pub demonstrations: Vec<Demonstration>,
    pub aligner: Option<AlignerText>,
    pub test_input: TestInput,
    pub test_rendering: String,
    pub final_text: String,
    pub token_count: usize,
    pub dropped: usize,
}

impl PromptPlan {
    /// Recomputes the prompt text from the other fields.
    pub fn render(&self) -> String {
        let demos: Vec<String> = self.demonstrations.iter().map(|d| d.rendered.clone()).collect();
        render_prompt(
            &self.separator,
            &demos,
            self.aligner.as_ref().map(|a| a.text.as_str()),
            &self.test_rendering,
            self.trailing_separator,
        )
    }

    pub fn default_budget_policy(&self) -> BudgetPolicy {
        if self.demonstrations.iter().all(|d| d.score.is_some()) && self.strategy.kind != StrategyKind::Dissimilar {
            BudgetPolicy::LowestSimilarityFirst
        } else {
            BudgetPolicy::LastSelectedFirst
        }
    }

    pub fn demo_ids(&self) -> Vec<usize> {
        self.demonstrations.iter().map(|d| d.example.id).collect()
    }
}

/// Counts tokens in a prompt.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-delimited words times 1.3, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCountCounter;

impl TokenCounter for WordCountCounter {
    fn count(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        (words * 13).div_ceil(10)
    }
}

/// Drops demonstrations until the prompt fits in `max_tokens`. The aligner
/// and test input are never removed.
pub fn enforce_budget(
    mut plan: PromptPlan,
    max_tokens: usize,
    counter: &dyn TokenCounter,
    policy: BudgetPolicy,
) -> Result<PromptPlan> {
    if max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be positive".into()));
    }
    plan.token_count = counter.count(&plan.final_text);
    while plan.token_count > max_tokens {
        if plan.demonstrations.is_empty() {
            return Err(Error::Unrepresentable {
                id: plan.test_input.id,
                tokens: plan.token_count,
                budget: max_tokens,
            });
        }
        let victim = match policy {
            BudgetPolicy::LastSelectedFirst => plan.demonstrations.len() - 1,
            BudgetPolicy::LowestSimilarityFirst => lowest_scored(&plan.demonstrations),
        };
        plan.demonstrations.remove(victim);
        plan.dropped += 1;
        plan.final_text = plan.render();
        plan.token_count = counter.count(&plan.final_text);
    }
    Ok(plan)
}

fn lowest_scored(demos: &[Demonstration]) -> usize {
    let mut victim = demos.len() - 1;
    let mut lowest = f64::INFINITY;
    for (i, d) in demos.iter().enumerate() {
        match d.score {
            Some(s) if s <= lowest => {
                lowest = s;
                victim = i;
            }
            Some(_) => {}
            None => return demos.len() - 1,
        }
    }
    victim
}

/// Everything a strategy may need. Optional members are only required by the
/// strategies that use them.
#[derive(Clone, Copy)]
pub struct PromptDeps<'a> {
    pub dataset: &'a Dataset,
    pub verbalizers: &'a VerbalizerRegistry,
    pub config: &'a PromptConfig,
    pub catalog: Option<&'a AlignerCatalog>,
    /// Index over the source language's training examples.
    pub index: Option<&'a EmbeddingIndex>,
    pub embedder: Option<&'a dyn Embedder>,
    pub spanfill: Option<&'a dyn SpanFiller>,
    /// Precomputed test-input embeddings keyed by test example id.
    pub query_vectors: Option<&'a BTreeMap<usize, Vector>>,
}

impl<'a> PromptDeps<'a> {
    pub fn new(dataset: &'a Dataset, verbalizers: &'a VerbalizerRegistry, config: &'a PromptConfig) -> Self {
        PromptDeps {
            dataset,
            verbalizers,
            config,
            catalog: None,
            index: None,
            embedder: None,
            spanfill: None,
            query_vectors: None,
        }
    }

    /// Fails with the first dependency `strategy` lacks for `source`→`target`.
    pub fn check(&self, strategy: &Strategy, source: &LanguageCode, target: &LanguageCode) -> Result<()> {
        let task = &self.dataset.name;
        let need = |dependency: &str| Error::MissingDependency {
            strategy: strategy.to_string(),
            dependency: dependency.to_string(),
        };
        self.verbalizers.get(task, source)?;
        self.verbalizers.get(task, target)?;
        self.dataset.label_space(source)?;
        self.dataset.label_space(target)?;
        if strategy.kind.uses_index(self.config) {
            if self.index.is_none() {
                return Err(need("embedding index"));
            }
            if self.embedder.is_none() && self.query_vectors.is_none() {
                return Err(need("embedder for test inputs"));
            }
        }
        if strategy.variant.yields_text() && strategy.kind != StrategyKind::AutoAligner {
            let catalog = self.catalog.ok_or_else(|| need("aligner catalog"))?;
            catalog.check(&strategy.variant, task, source, target)?;
            if let AlignerVariant::ThirdLanguage(third) = &strategy.variant {
                self.dataset.label_space(third)?;
            }
        }
        if strategy.kind == StrategyKind::AutoAligner && self.spanfill.is_none() {
            return Err(need("span-fill client"));
        }
        Ok(())
    }

    fn query(&self, test: &LabeledExample, strategy: &Strategy) -> Result<Vector> {
        if let Some(v) = self.query_vectors.and_then(|m| m.get(&test.id)) {
            return Ok(v.clone());
        }
        let index = self.index.ok_or_else(|| Error::MissingDependency {
            strategy: strategy.to_string(),
            dependency: "embedding index".into(),
        })?;
        let embedder = self.embedder.ok_or_else(|| Error::MissingDependency {
            strategy: strategy.to_string(),
            dependency: "embedder for test inputs".into(),
        })?;
        index.embed_query(embedder, &test.text)
    }

    fn retrieve(
        &self,
        strategy: &Strategy,
        source: &LanguageCode,
        test: &LabeledExample,
        k: usize,
        most_similar: bool,
    ) -> Result<Vec<(LabeledExample, Option<f64>)>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let index = self.index.ok_or_else(|| Error::MissingDependency {
            strategy: strategy.to_string(),
            dependency: "embedding index".into(),
        })?;
        let query = self.query(test, strategy)?;
        let hits: Vec<SimilarityHit> =
            if most_similar { index.top_k(&query, k)? } else { index.bottom_k(&query, k)? };
        hits.into_iter()
            .map(|hit| {
                let ex = self
                    .dataset
                    .example(Split::Train, hit.example_id)
                    .filter(|e| &e.lang == source)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "index entry {} is not a {source} training example",
                            hit.example_id
                        ))
                    })?;
                Ok((ex.clone(), Some(hit.score)))
            })
            .collect()
    }
}

/// Builds the prompt for one test example. `test.lang` is the target
/// language; `seed` drives random demonstration sampling.
pub fn build_prompt(
    deps: &PromptDeps<'_>,
    strategy: &Strategy,
    source: &LanguageCode,
    test: &LabeledExample,
    k: usize,
    seed: u64,
) -> Result<PromptPlan> {
    let target = &test.lang;
    let task = deps.dataset.name.as_str();
    let config = deps.config;
    let src_template = deps.verbalizers.get(task, source)?;
    let tgt_template = deps.verbalizers.get(task, target)?;
    let src_space = deps.dataset.label_space(source)?;

    let selected = if strategy.kind.uses_index(config) {
        let most_similar = strategy.kind != StrategyKind::Dissimilar;
        deps.retrieve(strategy, source, test, k, most_similar)?
    } else {
        sample_random(deps.dataset, source, Split::Train, k, seed)?
            .into_iter()
            .map(|e| (e, None))
            .collect()
    };
    let demonstrations = selected
        .into_iter()
        .map(|(example, score)| {
            let rendered = format_demonstration(&example, src_template, src_space)?;
            Ok(Demonstration { example, score, rendered })
        })
        .collect::<Result<Vec<_>>>()?;
    let rendered: Vec<String> = demonstrations.iter().map(|d| d.rendered.clone()).collect();
    let test_rendering = format_test_input(&test.text, tgt_template);

    let aligner = if strategy.kind == StrategyKind::AutoAligner {
        let filler = deps.spanfill.ok_or_else(|| Error::MissingDependency {
            strategy: strategy.to_string(),
            dependency: "span-fill client".into(),
        })?;
        let context = assemble_context(&rendered, &config.separator)?.text();
        Some(generate_auto_aligner(filler, &context, &test_rendering)?)
    } else if strategy.variant.yields_text() {
        let catalog = deps.catalog.ok_or_else(|| Error::MissingDependency {
            strategy: strategy.to_string(),
            dependency: "aligner catalog".into(),
        })?;
        render_variant(catalog, &strategy.variant, task, source, target, &deps.dataset.label_spaces)?
    } else {
        None
    };

    assemble_context(&rendered, &config.separator)?;
    let final_text = render_prompt(
        &config.separator,
        &rendered,
        aligner.as_ref().map(|a| a.text.as_str()),
        &test_rendering,
        config.trailing_separator,
    );
    Ok(PromptPlan {
        strategy: strategy.clone(),
        source: source.clone(),
        target: target.clone(),
        separator: config.separator.clone(),
        trailing_separator: config.trailing_separator,
        demonstrations,
        aligner,
        test_input: TestInput { id: test.id, text: test.text.clone(), lang: target.clone() },
        test_rendering,
        final_text,
        token_count: 0,
        dropped: 0,
    })
}
