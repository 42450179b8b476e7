//! Task aligners: the sentence placed between the demonstrations and the test
//! input that names the target language and maps source label words onto
//! target label words, e.g. "In French bad means mal and good means bien.".
//!
//! The catalog is plain data (see `assets/aligners.toml`). Besides the
//! canonical sentence, [`render_variant`] produces the ablations used to probe
//! why aligners help: no aligner, a uniform (source) label space, language
//! information only, the aligner of an unrelated third language, and an
//! aligner with the target words permuted.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, LabelSpaces, LanguageCode};
use crate::error::{Error, Result};
use crate::transport::{EndpointConfig, JsonClient};

const BUILTIN_CATALOG: &str = include_str!("../assets/aligners.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_target_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_only: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    #[serde(default)]
    display_names: BTreeMap<String, String>,
    #[serde(default)]
    language_only: BTreeMap<String, String>,
    #[serde(default)]
    aligner: Vec<CatalogRow>,
}

#[derive(Deserialize)]
struct CatalogRow {
    task: String,
    src: String,
    tgt: String,
    #[serde(flatten)]
    entry: CatalogEntry,
}

type EntryKey = (String, LanguageCode, LanguageCode);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignerCatalog {
    display_names: BTreeMap<LanguageCode, String>,
    language_only: BTreeMap<LanguageCode, String>,
    entries: BTreeMap<EntryKey, CatalogEntry>,
}

impl AlignerCatalog {
    /// The catalog shipped with the crate.
    pub fn builtin() -> Self {
        AlignerCatalog::from_toml_str(BUILTIN_CATALOG).expect("built-in aligner catalog is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AlignerCatalog::from_toml_str(&raw).map_err(|e| Error::config(path, e.to_string()))
    }

    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let file: CatalogFile =
            toml::from_str(raw).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut catalog = AlignerCatalog::default();
        for (code, name) in file.display_names {
            catalog.display_names.insert(code.parse()?, name);
        }
        for (code, template) in file.language_only {
            check_placeholders(&template)?;
            catalog.language_only.insert(code.parse()?, template);
        }
        for row in file.aligner {
            let src = row.src.parse()?;
            let tgt = row.tgt.parse()?;
            catalog.insert(&row.task, src, tgt, row.entry)?;
        }
        Ok(catalog)
    }

    pub fn insert(
        &mut self,
        task: &str,
        src: LanguageCode,
        tgt: LanguageCode,
        entry: CatalogEntry,
    ) -> Result<()> {
        check_placeholders(&entry.template)?;
        if let Some(t) = &entry.language_only {
            check_placeholders(t)?;
        }
        self.entries.insert((task.to_string(), src, tgt), entry);
        Ok(())
    }

    pub fn entry(&self, task: &str, src: &LanguageCode, tgt: &LanguageCode) -> Result<&CatalogEntry> {
        self.entries
            .get(&(task.to_string(), src.clone(), tgt.clone()))
            .ok_or_else(|| Error::MissingAligner {
                task: task.to_string(),
                src: src.to_string(),
                tgt: tgt.to_string(),
            })
    }

    pub fn contains(&self, task: &str, src: &LanguageCode, tgt: &LanguageCode) -> bool {
        self.entry(task, src, tgt).is_ok()
    }

    pub fn display_name(&self, lang: &LanguageCode) -> Option<&str> {
        self.display_names.get(lang).map(String::as_str)
    }

    /// All (task, src, tgt) keys, sorted.
    pub fn keys(&self) -> impl Iterator<Item = (&str, &LanguageCode, &LanguageCode)> {
        self.entries.keys().map(|(t, s, g)| (t.as_str(), s, g))
    }

    /// Checks that `variant` can be rendered for (task, src, tgt) without
    /// rendering it.
    pub fn check(
        &self,
        variant: &AlignerVariant,
        task: &str,
        src: &LanguageCode,
        tgt: &LanguageCode,
    ) -> Result<()> {
        match variant {
            AlignerVariant::None | AlignerVariant::UniformLabelSpace => Ok(()),
            AlignerVariant::Canonical | AlignerVariant::Incorrect => {
                self.entry(task, src, tgt).map(|_| ())
            }
            AlignerVariant::LanguageOnly => {
                let entry = self.entry(task, src, tgt)?;
                if entry.language_only.is_none() && !self.language_only.contains_key(src) {
                    return Err(missing(task, src, tgt));
                }
                Ok(())
            }
            AlignerVariant::ThirdLanguage(third) => {
                check_third(third, src, tgt)?;
                self.entry(task, src, third).map(|_| ())
            }
        }
    }

    fn target_name<'a>(&'a self, entry: &'a CatalogEntry, tgt: &LanguageCode, own_pair: bool) -> Option<&'a str> {
        let name = if own_pair { entry.pair_target_name.as_deref() } else { None };
        name.or(entry.target_name.as_deref()).or_else(|| self.display_name(tgt))
    }
}

fn missing(task: &str, src: &LanguageCode, tgt: &LanguageCode) -> Error {
    Error::MissingAligner { task: task.to_string(), src: src.to_string(), tgt: tgt.to_string() }
}

fn check_third(third: &LanguageCode, src: &LanguageCode, tgt: &LanguageCode) -> Result<()> {
    if third == src || third == tgt {
        return Err(Error::InvalidArgument(format!(
            "third-language aligner {third} must differ from source {src} and target {tgt}"
        )));
    }
    Ok(())
}

fn is_known_placeholder(name: &str) -> bool {
    if name == "TGT_NAME" {
        return true;
    }
    ["SRC_LABEL_", "TGT_LABEL_"].iter().any(|p| {
        name.strip_prefix(p)
            .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
    })
}

fn placeholders(template: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::InvalidArgument(format!("unclosed placeholder in {template:?}")))?;
        out.push(&after[..close]);
        rest = &after[close + 1..];
    }
    Ok(out)
}

fn check_placeholders(template: &str) -> Result<()> {
    for name in placeholders(template)? {
        if !is_known_placeholder(name) {
            return Err(Error::UnresolvedPlaceholder(name.to_string()));
        }
    }
    Ok(())
}

/// Substitutes `{NAME}` placeholders; any name missing from `values` is an
/// error naming it.
fn substitute(template: &str, values: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::InvalidArgument(format!("unclosed placeholder in {template:?}")))?;
        let name = &after[..close];
        let value = values.get(name).ok_or_else(|| Error::UnresolvedPlaceholder(name.to_string()))?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn label_values(
    target_name: Option<&str>,
    src: &LabelSpace,
    tgt: &LabelSpace,
    rotate_target: bool,
) -> Result<BTreeMap<String, String>> {
    if src.len() != tgt.len() {
        return Err(Error::LabelSpaceMismatch { left: src.len(), right: tgt.len() });
    }
    let n = tgt.len();
    let mut values = BTreeMap::new();
    if let Some(name) = target_name {
        values.insert("TGT_NAME".to_string(), name.to_string());
    }
    for (i, label) in src.labels().iter().enumerate() {
        values.insert(format!("SRC_LABEL_{i}"), label.verbalization.clone());
    }
    for i in 0..n {
        let j = if rotate_target { (i + 1) % n } else { i };
        values.insert(format!("TGT_LABEL_{i}"), tgt.labels()[j].verbalization.clone());
    }
    Ok(values)
}

/// Which aligner, if any, accompanies the demonstrations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum AlignerVariant {
    #[default]
    Canonical,
    /// No aligner sentence.
    None,
    /// No aligner sentence; predictions use the source label space.
    UniformLabelSpace,
    /// Only names the target language.
    LanguageOnly,
    /// The canonical aligner of another language pair (source to `0`).
    ThirdLanguage(LanguageCode),
    /// Canonical template with target verbalizations rotated by one position
    /// (a swap for binary tasks).
    Incorrect,
}

impl AlignerVariant {
    pub fn yields_text(&self) -> bool {
        !matches!(self, AlignerVariant::None | AlignerVariant::UniformLabelSpace)
    }

    /// True when predictions are made over the source label space.
    pub fn predicts_in_source_space(&self) -> bool {
        matches!(self, AlignerVariant::UniformLabelSpace)
    }

    pub const NAMES: [&'static str; 6] = [
        "canonical",
        "none",
        "uniform_label_space",
        "language_only",
        "third_language=<lang>",
        "incorrect",
    ];
}

impl fmt::Display for AlignerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignerVariant::Canonical => f.write_str("canonical"),
            AlignerVariant::None => f.write_str("none"),
            AlignerVariant::UniformLabelSpace => f.write_str("uniform_label_space"),
            AlignerVariant::LanguageOnly => f.write_str("language_only"),
            AlignerVariant::ThirdLanguage(l) => write!(f, "third_language={l}"),
            AlignerVariant::Incorrect => f.write_str("incorrect"),
        }
    }
}

impl FromStr for AlignerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "canonical" => AlignerVariant::Canonical,
            "none" => AlignerVariant::None,
            "uniform_label_space" | "uniform" => AlignerVariant::UniformLabelSpace,
            "language_only" => AlignerVariant::LanguageOnly,
            "incorrect" => AlignerVariant::Incorrect,
            other => match other.strip_prefix("third_language=") {
                Some(code) => AlignerVariant::ThirdLanguage(code.parse()?),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown aligner variant `{other}` (expected one of: {})",
                        AlignerVariant::NAMES.join(", ")
                    )))
                }
            },
        })
    }
}

impl Serialize for AlignerVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlignerVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Catalog,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignerText {
    pub text: String,
    pub provenance: Provenance,
    pub variant: AlignerVariant,
}

/// Renders the canonical aligner of (task, src, tgt).
pub fn render_aligner(
    catalog: &AlignerCatalog,
    task: &str,
    src: &LanguageCode,
    tgt: &LanguageCode,
    src_space: &LabelSpace,
    tgt_space: &LabelSpace,
) -> Result<AlignerText> {
    let entry = catalog.entry(task, src, tgt)?;
    let name = catalog.target_name(entry, tgt, true);
    let text = substitute(&entry.template, &label_values(name, src_space, tgt_space, false)?)?;
    Ok(AlignerText { text, provenance: Provenance::Catalog, variant: AlignerVariant::Canonical })
}

/// Renders `variant` for (task, src, tgt). Returns `None` for the variants
/// that carry no aligner sentence.
pub fn render_variant(
    catalog: &AlignerCatalog,
    variant: &AlignerVariant,
    task: &str,
    src: &LanguageCode,
    tgt: &LanguageCode,
    spaces: &LabelSpaces,
) -> Result<Option<AlignerText>> {
    let space = |lang: &LanguageCode| {
        spaces.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    };
    let text = match variant {
        AlignerVariant::None | AlignerVariant::UniformLabelSpace => return Ok(None),
        AlignerVariant::Canonical => {
            catalog.entry(task, src, tgt)?;
            return render_aligner(catalog, task, src, tgt, space(src)?, space(tgt)?).map(Some)
        }
        AlignerVariant::LanguageOnly => {
            let entry = catalog.entry(task, src, tgt)?;
            let template = entry
                .language_only
                .as_ref()
                .or_else(|| catalog.language_only.get(src))
                .ok_or_else(|| missing(task, src, tgt))?;
            let mut values = BTreeMap::new();
            if let Some(name) = catalog.target_name(entry, tgt, true) {
                values.insert("TGT_NAME".to_string(), name.to_string());
            }
            substitute(template, &values)?
        }
        AlignerVariant::ThirdLanguage(third) => {
            check_third(third, src, tgt)?;
            let entry = catalog.entry(task, src, third)?;
            let name = catalog.target_name(entry, third, false);
            substitute(&entry.template, &label_values(name, space(src)?, space(third)?, false)?)?
        }
        AlignerVariant::Incorrect => {
            let entry = catalog.entry(task, src, tgt)?;
            if !placeholders(&entry.template)?.iter().any(|p| p.starts_with("TGT_LABEL_")) {
                return Err(Error::InvalidArgument(format!(
                    "aligner for {task} {src}->{tgt} has no target-label placeholders to permute"
                )));
            }
            let name = catalog.target_name(entry, tgt, true);
            substitute(&entry.template, &label_values(name, space(src)?, space(tgt)?, true)?)?
        }
    };
    Ok(Some(AlignerText { text, provenance: Provenance::Catalog, variant: variant.clone() }))
}

/// A mask-filling model that proposes the text between a context and a test
/// input.
pub trait SpanFiller: Send + Sync {
    fn mask_token(&self) -> &str;

    /// Returns the span generated for the single mask in `text`.
    fn fill(&self, text: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanFillRequest {
    pub text: String,
    pub mask_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanFillResponse {
    pub span: String,
}

/// Default sentinel, the first mT5 span-corruption token.
pub const DEFAULT_MASK_TOKEN: &str = "<extra_id_0>";

/// Client for `POST /spanfill`.
#[derive(Debug)]
pub struct HttpSpanFiller {
    client: JsonClient,
    mask_token: String,
}

impl HttpSpanFiller {
    pub fn new(config: EndpointConfig, mask_token: impl Into<String>) -> Self {
        HttpSpanFiller { client: JsonClient::new(config), mask_token: mask_token.into() }
    }

    pub fn requests_sent(&self) -> u64 {
        self.client.requests_sent()
    }
}

impl SpanFiller for HttpSpanFiller {
    fn mask_token(&self) -> &str {
        &self.mask_token
    }

    fn fill(&self, text: &str) -> Result<String> {
        let request = SpanFillRequest { text: text.to_string(), mask_token: self.mask_token.clone() };
        let response: SpanFillResponse = self.client.post("/spanfill", &request)?;
        Ok(response.span)
    }
}

/// Returns a fixed span and records every input it was asked to fill.
#[derive(Debug)]
pub struct MockSpanFiller {
    span: String,
    mask_token: String,
    seen: Mutex<Vec<String>>,
}

impl MockSpanFiller {
    pub fn new(span: impl Into<String>) -> Self {
        MockSpanFiller {
            span: span.into(),
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn with_mask_token(mut self, mask: impl Into<String>) -> Self {
        self.mask_token = mask.into();
        self
    }

    pub fn requests(&self) -> Vec<String> {
        self.seen.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl SpanFiller for MockSpanFiller {
    fn mask_token(&self) -> &str {
        &self.mask_token
    }

    fn fill(&self, text: &str) -> Result<String> {
        self.seen.lock().unwrap_or_else(|p| p.into_inner()).push(text.to_string());
        Ok(self.span.clone())
    }
}

/// The span-fill input: context, mask and test input joined by single spaces,
/// with an empty context omitted.
pub fn spanfill_input(context: &str, mask_token: &str, test_input: &str) -> String {
    [context, mask_token, test_input]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Asks `filler` for the text bridging `context` and `test_input`.
pub fn generate_auto_aligner(
    filler: &dyn SpanFiller,
    context: &str,
    test_input: &str,
) -> Result<AlignerText> {
    let input = spanfill_input(context, filler.mask_token(), test_input);
    let span = filler.fill(&input)?;
    let span = span.trim();
    if span.is_empty() {
        return Err(Error::DegenerateSpan);
    }
    Ok(AlignerText {
        text: span.to_string(),
        provenance: Provenance::Generated,
        variant: AlignerVariant::Canonical,
    })
}
