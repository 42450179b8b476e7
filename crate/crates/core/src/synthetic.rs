//! Generated keyword corpora for offline checks of demonstration selection.
//!
//! Every label owns a set of pseudo-words split into *seen* words, which
//! appear in training examples, and *unseen* words, which never do. A
//! training example carries one seen word of its own label plus neutral
//! filler. A test example carries one seen word of its gold label and one
//! unseen word of a different label, so its surface cues are balanced and
//! only the demonstrations can tip the keyword scorer toward the gold label.
//! Nearest neighbors by character trigrams share the seen word; random
//! demonstrations rarely do.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    write_records_file, Dataset, DatasetDescriptor, LabelSpace, LabeledExample, LanguageCode, Split,
};
use crate::error::{Error, Result};
use crate::inference::Lexicon;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub name: String,
    pub seed: u64,
    /// `(code, verbalizations)` in label order.
    pub languages: Vec<(LanguageCode, Vec<String>)>,
    pub label_ids: Vec<String>,
    /// Seen words per label.
    pub words_per_label: usize,
    pub train_per_language: usize,
    pub test_per_language: usize,
}

impl SyntheticSpec {
    /// Binary sentiment-like corpus over English, Spanish and French.
    pub fn binary(seed: u64, train_per_language: usize, test_per_language: usize) -> Self {
        let lang = |c: &str| c.parse::<LanguageCode>().expect("valid code");
        let words = |a: &str, b: &str| vec![a.to_string(), b.to_string()];
        SyntheticSpec {
            name: "keywords".into(),
            seed,
            languages: vec![
                (lang("en"), words("bad", "good")),
                (lang("es"), words("malo", "bueno")),
                (lang("fr"), words("mal", "bien")),
            ],
            label_ids: vec!["negative".into(), "positive".into()],
            words_per_label: 20,
            train_per_language,
            test_per_language,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// Cue words per label id (seen and unseen).
    pub lexicon: BTreeMap<String, Vec<String>>,
    pub descriptor: DatasetDescriptor,
}

impl SyntheticCorpus {
    /// Cue words in label-space order.
    pub fn lexicon_for(&self, space: &LabelSpace) -> Lexicon {
        Lexicon::new(
            space.labels().iter().map(|l| self.lexicon.get(&l.id).cloned().unwrap_or_default()),
        )
    }

    /// Writes the descriptor and split files to `dir`; returns the
    /// descriptor path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut descriptor = self.descriptor.clone();
        for split in [Split::Train, Split::Test] {
            let file = PathBuf::from(format!("{}.{split}.jsonl", self.descriptor.name));
            write_records_file(&dir.join(&file), self.dataset.examples(split))?;
            descriptor.files.insert(split, file);
        }
        let path = dir.join(format!("{}.toml", self.descriptor.name));
        let body = toml::to_string(&descriptor).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const FILLER: &[&str] = &["item", "arrived", "today", "package", "order", "box", "week", "store"];

struct WordMill {
    rng: ChaCha8Rng,
    issued: BTreeSet<String>,
}

impl WordMill {
    fn below(&mut self, n: usize) -> usize {
        (self.rng.next_u64() % n as u64) as usize
    }

    fn word(&mut self) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..3 {
                w.push(CONSONANTS[self.below(CONSONANTS.len())] as char);
                w.push(VOWELS[self.below(VOWELS.len())] as char);
            }
            w.push(CONSONANTS[self.below(CONSONANTS.len())] as char);
            if self.issued.insert(w.clone()) {
                return w;
            }
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let n_labels = spec.label_ids.len();
    if n_labels < 2 || spec.words_per_label == 0 {
        return Err(Error::InvalidArgument("need at least two labels and one word per label".into()));
    }
    let mut mill = WordMill { rng: ChaCha8Rng::seed_from_u64(spec.seed), issued: BTreeSet::new() };
    let seen: Vec<Vec<String>> =
        (0..n_labels).map(|_| (0..spec.words_per_label).map(|_| mill.word()).collect()).collect();
    let unseen: Vec<Vec<String>> =
        (0..n_labels).map(|_| (0..spec.words_per_label).map(|_| mill.word()).collect()).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lang, _) in &spec.languages {
        for i in 0..spec.train_per_language {
            let label = i % n_labels;
            let word = &seen[label][(i / n_labels) % spec.words_per_label];
            let filler = FILLER[mill.below(FILLER.len())];
            train.push(LabeledExample {
                id: train.len(),
                text: format!("{filler} {word}"),
                label: spec.label_ids[label].clone(),
                lang: lang.clone(),
            });
        }
        for i in 0..spec.test_per_language {
            let label = i % n_labels;
            let other = (label + 1 + mill.below(n_labels - 1)) % n_labels;
            let cue = &seen[label][mill.below(spec.words_per_label)];
            let decoy = &unseen[other][mill.below(spec.words_per_label)];
            let text = if mill.below(2) == 0 { format!("{cue} {decoy}") } else { format!("{decoy} {cue}") };
            test.push(LabeledExample { id: test.len(), text, label: spec.label_ids[label].clone(), lang: lang.clone() });
        }
    }

    let descriptor = DatasetDescriptor {
        name: spec.name.clone(),
        languages: spec.languages.iter().map(|(l, _)| l.to_string()).collect(),
        label_ids: Some(spec.label_ids.clone()),
        verbalizations: spec.languages.iter().map(|(l, w)| (l.to_string(), w.clone())).collect(),
        ..Default::default()
    };
    let spaces = descriptor.label_spaces()?;
    let languages = descriptor.language_codes()?;
    let splits = [(Split::Train, train), (Split::Test, test)].into_iter().collect();
    let lexicon = spec
        .label_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), seen[i].iter().chain(&unseen[i]).cloned().collect()))
        .collect();
    Ok(SyntheticCorpus { dataset: Dataset::new(spec.name.clone(), languages, spaces, splits), lexicon, descriptor })
}
