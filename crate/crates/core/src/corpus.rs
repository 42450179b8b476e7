//! Datasets, language codes, label spaces and seeded demonstration sampling.
//!
//! Datasets are stored as newline-delimited JSON, one `{"text", "label",
//! "lang"}` object per line. A TOML descriptor names the task, its languages,
//! the ordered label verbalizations per language and the split files.
//!
//! Label spaces of one task are aligned by position: the i-th label of the
//! English space corresponds to the i-th label of the Spanish space. That
//! positional correspondence is the cross-language label mapping.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-letter ISO 639-1 language code, lower case.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for LanguageCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower.len() == 2 && lower.bytes().all(|b| b.is_ascii_lowercase()) {
            Ok(LanguageCode(lower))
        } else {
            Err(Error::UnknownLanguage(s.to_string()))
        }
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LanguageCode> for String {
    fn from(code: LanguageCode) -> String {
        code.0
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub code: LanguageCode,
    pub name: String,
    pub family: String,
}

/// Closed set of languages known to a run. Registration order is the order
/// used for report rows and columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageRegistry {
    entries: Vec<LanguageInfo>,
}

impl Default for LanguageRegistry {
    /// German, English, Spanish, French, Japanese and Mandarin.
    fn default() -> Self {
        let table = [
            ("de", "German", "IE: Germanic"),
            ("en", "English", "IE: Germanic"),
            ("es", "Spanish", "IE: Italic"),
            ("fr", "French", "IE: Italic"),
            ("ja", "Japanese", "Japanic"),
            ("zh", "Mandarin", "Sino-Tibetan"),
        ];
        let entries = table
            .iter()
            .map(|(code, name, family)| LanguageInfo {
                code: LanguageCode(code.to_string()),
                name: name.to_string(),
                family: family.to_string(),
            })
            .collect();
        LanguageRegistry { entries }
    }
}

impl LanguageRegistry {
    pub fn empty() -> Self {
        LanguageRegistry { entries: Vec::new() }
    }

    /// Adds a language; re-registering an existing code replaces its metadata
    /// but keeps its position.
    pub fn register(&mut self, info: LanguageInfo) {
        match self.entries.iter_mut().find(|e| e.code == info.code) {
            Some(existing) => *existing = info,
            None => self.entries.push(info),
        }
    }

    /// Parses `code` and checks that it is registered.
    pub fn resolve(&self, code: &str) -> Result<LanguageCode> {
        let parsed: LanguageCode = code.parse()?;
        if self.contains(&parsed) {
            Ok(parsed)
        } else {
            Err(Error::UnknownLanguage(code.to_string()))
        }
    }

    pub fn contains(&self, code: &LanguageCode) -> bool {
        self.entries.iter().any(|e| &e.code == code)
    }

    pub fn info(&self, code: &LanguageCode) -> Option<&LanguageInfo> {
        self.entries.iter().find(|e| &e.code == code)
    }

    pub fn position(&self, code: &LanguageCode) -> Option<usize> {
        self.entries.iter().position(|e| &e.code == code)
    }

    pub fn codes(&self) -> impl Iterator<Item = &LanguageCode> {
        self.entries.iter().map(|e| &e.code)
    }

    /// Sorts `codes` by registration order; unregistered codes go last.
    pub fn sort(&self, codes: &mut [LanguageCode]) {
        codes.sort_by_key(|c| (self.position(c).unwrap_or(usize::MAX), c.clone()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: usize,
    pub text: String,
    pub label: String,
    pub lang: LanguageCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: String,
    pub verbalization: String,
}

/// Ordered label verbalizations of one task in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    lang: LanguageCode,
    labels: Vec<Label>,
}

impl LabelSpace {
    /// Ids and verbalizations must each be unique and non-empty.
    pub fn new(lang: LanguageCode, labels: Vec<Label>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument(format!("{lang}: empty label space")));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.id.is_empty() || label.verbalization.trim().is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{lang}: label {i} has an empty id or verbalization"
                )));
            }
            let dup = labels[..i]
                .iter()
                .any(|l| l.id == label.id || l.verbalization == label.verbalization);
            if dup {
                return Err(Error::InvalidArgument(format!(
                    "{lang}: duplicate label `{}` / `{}`",
                    label.id, label.verbalization
                )));
            }
        }
        Ok(LabelSpace { lang, labels })
    }

    /// Space whose label ids are the verbalizations themselves.
    pub fn from_verbalizations<S: AsRef<str>>(lang: LanguageCode, words: &[S]) -> Result<Self> {
        let labels = words
            .iter()
            .map(|w| Label { id: w.as_ref().to_string(), verbalization: w.as_ref().to_string() })
            .collect();
        LabelSpace::new(lang, labels)
    }

    pub fn lang(&self) -> &LanguageCode {
        &self.lang
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label_id: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.id == label_id)
    }

    pub fn verbalization(&self, label_id: &str) -> Option<&str> {
        self.labels.iter().find(|l| l.id == label_id).map(|l| l.verbalization.as_str())
    }

    pub fn verbalizations(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.verbalization.clone()).collect()
    }

    fn require(&self, label_id: &str) -> Result<usize> {
        self.index_of(label_id).ok_or_else(|| Error::UnknownLabel {
            label: label_id.to_string(),
            lang: self.lang.to_string(),
        })
    }
}

/// Maps a label of `src` to the label at the same position in `tgt`.
pub fn map_label<'a>(label_id: &str, src: &LabelSpace, tgt: &'a LabelSpace) -> Result<&'a str> {
    if src.len() != tgt.len() {
        return Err(Error::LabelSpaceMismatch { left: src.len(), right: tgt.len() });
    }
    let pos = src.require(label_id)?;
    Ok(&tgt.labels[pos].id)
}

pub type LabelSpaces = BTreeMap<LanguageCode, LabelSpace>;

/// TOML description of a dataset on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    pub languages: Vec<String>,
    /// Shared label ids, in label-space order. When absent, each language uses
    /// its own verbalizations as ids.
    #[serde(default)]
    pub label_ids: Option<Vec<String>>,
    pub verbalizations: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub files: BTreeMap<Split, PathBuf>,
    #[serde(default)]
    pub expected_counts: BTreeMap<Split, BTreeMap<String, usize>>,
    /// Languages outside the default registry, as `code = "family"`.
    #[serde(default)]
    pub extra_languages: BTreeMap<String, String>,
}

impl DatasetDescriptor {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&raw).map_err(|e| Error::config(path, e.to_string()))
    }

    pub fn registry(&self) -> Result<LanguageRegistry> {
        let mut registry = LanguageRegistry::default();
        for (code, family) in &self.extra_languages {
            let code: LanguageCode = code.parse()?;
            let name = code.to_string();
            registry.register(LanguageInfo { code, name, family: family.clone() });
        }
        Ok(registry)
    }

    /// Resolved languages in declaration order.
    pub fn language_codes(&self) -> Result<Vec<LanguageCode>> {
        let registry = self.registry()?;
        self.languages.iter().map(|l| registry.resolve(l)).collect()
    }

    pub fn label_spaces(&self) -> Result<LabelSpaces> {
        let mut spaces = LabelSpaces::new();
        let mut width = None;
        for lang in self.language_codes()? {
            let words = self.verbalizations.get(lang.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("no verbalizations declared for {lang}"))
            })?;
            let space = match &self.label_ids {
                Some(ids) => {
                    if ids.len() != words.len() {
                        return Err(Error::LabelSpaceMismatch {
                            left: ids.len(),
                            right: words.len(),
                        });
                    }
                    let labels = ids
                        .iter()
                        .zip(words)
                        .map(|(id, w)| Label { id: id.clone(), verbalization: w.clone() })
                        .collect();
                    LabelSpace::new(lang.clone(), labels)?
                }
                None => LabelSpace::from_verbalizations(lang.clone(), words)?,
            };
            match width {
                None => width = Some(space.len()),
                Some(w) if w != space.len() => {
                    return Err(Error::LabelSpaceMismatch { left: w, right: space.len() })
                }
                Some(_) => {}
            }
            spaces.insert(lang, space);
        }
        Ok(spaces)
    }
}

/// Validates records against declared languages and label spaces.
#[derive(Debug, Clone)]
pub struct RecordSchema {
    pub registry: LanguageRegistry,
    pub languages: Vec<LanguageCode>,
    pub spaces: LabelSpaces,
}

impl RecordSchema {
    pub fn from_descriptor(descriptor: &DatasetDescriptor) -> Result<Self> {
        Ok(RecordSchema {
            registry: descriptor.registry()?,
            languages: descriptor.language_codes()?,
            spaces: descriptor.label_spaces()?,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record<'a> {
    text: std::borrow::Cow<'a, str>,
    label: std::borrow::Cow<'a, str>,
    lang: std::borrow::Cow<'a, str>,
}

/// Parses newline-delimited JSON records. Blank lines are skipped; ids are
/// assigned in file order starting at 0.
pub fn parse_records<R: BufRead>(reader: R, schema: &RecordSchema) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.split(b'\n').enumerate() {
        let line_no = idx + 1;
        let bytes = line.map_err(|e| Error::Record { line: line_no, message: e.to_string() })?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Record { line: line_no, message: format!("invalid UTF-8: {e}") })?;
        let text = text.strip_suffix('\r').unwrap_or(text);
        if text.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(text)
            .map_err(|e| Error::Record { line: line_no, message: format!("malformed record: {e}") })?;
        let fail = |message: String| Error::Record { line: line_no, message };
        let lang = schema
            .registry
            .resolve(&record.lang)
            .ok()
            .filter(|l| schema.languages.contains(l))
            .ok_or_else(|| fail(format!("unknown language code `{}`", record.lang)))?;
        if record.text.trim().is_empty() {
            return Err(fail("empty text".to_string()));
        }
        let space = &schema.spaces[&lang];
        if space.index_of(&record.label).is_none() {
            return Err(fail(format!("label `{}` is not in the {lang} label space", record.label)));
        }
        out.push(LabeledExample {
            id: out.len(),
            text: record.text.into_owned(),
            label: record.label.into_owned(),
            lang,
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path, schema: &RecordSchema) -> Result<Vec<LabeledExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file), schema)
}

/// Writes records in canonical form: one compact JSON object per line with
/// keys in `text`, `label`, `lang` order.
pub fn write_records<W: Write>(mut writer: W, examples: &[LabeledExample]) -> std::io::Result<()> {
    for ex in examples {
        let record = Record {
            text: ex.text.as_str().into(),
            label: ex.label.as_str().into(),
            lang: ex.lang.as_str().into(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_records_file(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(file), examples).map_err(|e| Error::io(path, e))
}

/// An immutable, validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub languages: Vec<LanguageCode>,
    pub label_spaces: LabelSpaces,
    splits: BTreeMap<Split, Vec<LabeledExample>>,
    warnings: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        languages: Vec<LanguageCode>,
        label_spaces: LabelSpaces,
        splits: BTreeMap<Split, Vec<LabeledExample>>,
    ) -> Self {
        Dataset { name: name.into(), languages, label_spaces, splits, warnings: Vec::new() }
    }

    /// Loads the descriptor at `path` and the split files it names, relative
    /// to the descriptor's directory.
    pub fn open(path: &Path) -> Result<Self> {
        let descriptor = DatasetDescriptor::from_file(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        load_dataset(base, &descriptor)
    }

    pub fn examples(&self, split: Split) -> &[LabeledExample] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn examples_in(&self, split: Split, lang: &LanguageCode) -> Vec<&LabeledExample> {
        self.examples(split).iter().filter(|e| &e.lang == lang).collect()
    }

    pub fn example(&self, split: Split, id: usize) -> Option<&LabeledExample> {
        self.examples(split).get(id).filter(|e| e.id == id)
    }

    pub fn count(&self, split: Split, lang: &LanguageCode) -> usize {
        self.examples(split).iter().filter(|e| &e.lang == lang).count()
    }

    pub fn label_space(&self, lang: &LanguageCode) -> Result<&LabelSpace> {
        self.label_spaces.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Non-fatal problems found while loading, such as split-size drift.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

pub fn load_dataset(base_dir: &Path, descriptor: &DatasetDescriptor) -> Result<Dataset> {
    let schema = RecordSchema::from_descriptor(descriptor)?;
    let mut splits = BTreeMap::new();
    for (split, file) in &descriptor.files {
        let path = base_dir.join(file);
        let records = read_records(&path, &schema).map_err(|e| match e {
            Error::Record { line, message } => {
                Error::Record { line, message: format!("{}: {message}", path.display()) }
            }
            other => other,
        })?;
        splits.insert(*split, records);
    }
    let mut dataset =
        Dataset::new(descriptor.name.clone(), schema.languages, schema.spaces, splits);
    for (split, counts) in &descriptor.expected_counts {
        for (lang, expected) in counts {
            let lang = schema.registry.resolve(lang)?;
            let actual = dataset.count(*split, &lang);
            if actual != *expected {
                let warning = format!(
                    "{}: {lang}/{split} has {actual} records, descriptor declares {expected}",
                    descriptor.name
                );
                log::warn!("{warning}");
                dataset.warnings.push(warning);
            }
        }
    }
    Ok(dataset)
}

/// Draws `k` distinct examples of `lang` from `split`, in draw order.
///
/// The generator is ChaCha8 seeded with `seed` via `seed_from_u64`; draws are
/// a partial Fisher-Yates shuffle over the language's examples in id order,
/// with unbiased rejection sampling for each bounded index. Nothing else
/// influences the result.
pub fn sample_random(
    dataset: &Dataset,
    lang: &LanguageCode,
    split: Split,
    k: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let pool = dataset.examples_in(split, lang);
    let picks = sample_indices(pool.len(), k, seed)?;
    Ok(picks.into_iter().map(|i| pool[i].clone()).collect())
}

/// `k` distinct indices below `n`, deterministic in `seed`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::SampleTooLarge { requested: k, available: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + uniform_below(&mut rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

fn uniform_below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let n = n as u64;
    let rejected = (u64::MAX % n + 1) % n;
    let limit = u64::MAX - rejected;
    loop {
        let v = rng.next_u64();
        if v <= limit {
            return (v % n) as usize;
        }
    }
}

/// SplitMix64 combination of a run seed with a per-item salt.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-language, per-label record counts of a split.
pub fn summarize(examples: &[LabeledExample]) -> BTreeMap<(LanguageCode, String), usize> {
    let mut counts = BTreeMap::new();
    for ex in examples {
        *counts.entry((ex.lang.clone(), ex.label.clone())).or_insert(0) += 1;
    }
    counts
}
