#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xlprompt::aligner::{render_aligner, render_variant, AlignerCatalog, AlignerVariant};
use xlprompt::corpus::{Dataset, LabelSpace, LabeledExample, LanguageCode, Split};
use xlprompt::embedding::{BuildOptions, EmbeddingIndex, PrecomputedEmbedder, Vector};
use xlprompt::eval::{
    emit_all, macro_f1, run_experiment, ExperimentConfig, ExperimentReport, Resources, RunOptions,
};
use xlprompt::prompt::{
    build_prompt, enforce_budget, BudgetPolicy, PromptConfig, PromptDeps, Strategy, VerbalizerRegistry,
    WordCountCounter,
};
use xlprompt::synthetic::{generate, SyntheticSpec};
use xlprompt::Error;

pub type Check = Result<String, String>;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(rel)
}

pub fn lang(code: &str) -> LanguageCode {
    code.parse().unwrap()
}

pub fn ensure(cond: bool, message: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message.into())
    }
}

// ---------------------------------------------------------------------------
// Retrieval

/// Scores every entry the way the index defines similarity (f64 dot of the
/// stored unit vectors with the unit query), then fully sorts.
pub fn brute_force(index: &EmbeddingIndex, query: &Vector, k: usize, most_similar: bool) -> Vec<(usize, f64)> {
    let q = query.normalized().unwrap();
    let mut all: Vec<(usize, f64)> = index
        .ids()
        .iter()
        .map(|&id| {
            let row = index.vector(id).unwrap();
            let mut s = 0.0f64;
            for (a, b) in row.iter().zip(q.as_slice()) {
                s += f64::from(*a) * f64::from(*b);
            }
            (id, s.clamp(-1.0, 1.0) + 0.0)
        })
        .collect();
    all.sort_by(|a, b| {
        let by_score = if most_similar { b.1.partial_cmp(&a.1) } else { a.1.partial_cmp(&b.1) };
        by_score.unwrap().then(a.0.cmp(&b.0))
    });
    all.truncate(k);
    all
}

fn gaussian_ish(rng: &mut ChaCha8Rng) -> f32 {
    // Sum of uniforms, coarsened to a grid so that some scores tie exactly.
    let u: f64 = (0..4).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64).sum::<f64>() - 2.0;
    ((u * 4.0).round() / 4.0) as f32
}

pub fn random_corpus(seed: u64, n: usize, dim: usize) -> (EmbeddingIndex, Vec<Vector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    while rows.len() < n {
        // Every tenth row duplicates an earlier one to force exact ties.
        if rows.len() % 10 == 9 {
            let j = (rng.next_u64() % rows.len() as u64) as usize;
            rows.push(rows[j].clone());
            continue;
        }
        let row: Vec<f32> = (0..dim).map(|_| gaussian_ish(&mut rng)).collect();
        if row.iter().any(|&x| x != 0.0) {
            rows.push(row);
        }
    }
    // Shuffled, non-contiguous ids so tie order by id is meaningful.
    let entries: Vec<(usize, Vector)> =
        rows.into_iter().enumerate().map(|(i, r)| (i * 7 % 1009 + 3, Vector::new(r).unwrap())).collect();
    let queries: Vec<Vector> = (0..3)
        .map(|_| loop {
            let q: Vec<f32> = (0..dim).map(|_| gaussian_ish(&mut rng)).collect();
            if q.iter().any(|&x| x != 0.0) {
                break Vector::new(q).unwrap();
            }
        })
        .chain(std::iter::once(entries[17].1.clone()))
        .collect();
    (EmbeddingIndex::from_vectors("oracle", entries).unwrap(), queries)
}

pub fn criterion_retrieval() -> Check {
    let start = Instant::now();
    let mut comparisons = 0;
    for corpus in 0..100u64 {
        let (index, queries) = random_corpus(corpus, 500, 64);
        for query in &queries {
            for k in [1, 4, 16] {
                let top: Vec<(usize, f64)> =
                    index.top_k(query, k).unwrap().into_iter().map(|h| (h.example_id, h.score)).collect();
                let bottom: Vec<(usize, f64)> =
                    index.bottom_k(query, k).unwrap().into_iter().map(|h| (h.example_id, h.score)).collect();
                ensure(top == brute_force(&index, query, k, true), format!("top_k differs: corpus {corpus}, k {k}"))?;
                ensure(
                    bottom == brute_force(&index, query, k, false),
                    format!("bottom_k differs: corpus {corpus}, k {k}"),
                )?;
                comparisons += 2;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 10.0, format!("took {elapsed:?}"))?;
    Ok(format!("{comparisons} rankings identical to the full sort in {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// Golden prompts

pub struct GoldenCase {
    pub name: &'static str,
    pub corpus: &'static str,
    pub strategy: &'static str,
    pub k: usize,
    pub seed: u64,
    pub trailing_separator: bool,
}

pub const GOLDEN_CASES: &[GoldenCase] = &[
    GoldenCase { name: "mixed_random", corpus: "marc_mixed", strategy: "random", k: 3, seed: 98, trailing_separator: true },
    GoldenCase { name: "mixed_semantic", corpus: "marc_mixed", strategy: "semantic", k: 2, seed: 98, trailing_separator: true },
    GoldenCase { name: "mixed_task_aligned", corpus: "marc_mixed", strategy: "task_aligned", k: 3, seed: 98, trailing_separator: true },
    GoldenCase { name: "mixed_x_insta", corpus: "marc_mixed", strategy: "x_insta", k: 2, seed: 98, trailing_separator: true },
    GoldenCase { name: "positive_random", corpus: "marc_positive", strategy: "random", k: 2, seed: 0, trailing_separator: false },
    GoldenCase {
        name: "positive_uniform_label_space",
        corpus: "marc_positive",
        strategy: "task_aligned:uniform_label_space",
        k: 2,
        seed: 0,
        trailing_separator: false,
    },
    GoldenCase {
        name: "positive_language_only",
        corpus: "marc_positive",
        strategy: "task_aligned:language_only",
        k: 2,
        seed: 0,
        trailing_separator: false,
    },
    GoldenCase {
        name: "positive_third_language",
        corpus: "marc_positive",
        strategy: "task_aligned:third_language=fr",
        k: 2,
        seed: 0,
        trailing_separator: false,
    },
    GoldenCase {
        name: "positive_incorrect",
        corpus: "marc_positive",
        strategy: "task_aligned:incorrect",
        k: 2,
        seed: 0,
        trailing_separator: false,
    },
];

pub fn golden_text(name: &str) -> String {
    fs::read_to_string(fixture(&format!("goldens/{name}.txt"))).unwrap()
}

pub fn render_golden_case(case: &GoldenCase) -> xlprompt::Result<xlprompt::prompt::PromptPlan> {
    let dataset = Dataset::open(&fixture(&format!("{}/marc.toml", case.corpus)))?;
    let verbalizers = VerbalizerRegistry::builtin();
    let catalog = AlignerCatalog::builtin();
    let config = PromptConfig { trailing_separator: case.trailing_separator, ..PromptConfig::default() };
    let strategy: Strategy = case.strategy.parse()?;
    let mut deps = PromptDeps::new(&dataset, &verbalizers, &config);
    deps.catalog = Some(&catalog);
    let vectors = fixture(&format!("{}/vectors.jsonl", case.corpus));
    let embedder = if vectors.exists() { Some(PrecomputedEmbedder::from_jsonl(&vectors)?) } else { None };
    let train: Vec<LabeledExample> = dataset.examples_in(Split::Train, &lang("en")).into_iter().cloned().collect();
    let index = match &embedder {
        Some(e) => Some(EmbeddingIndex::build(&train, e, BuildOptions::default())?),
        None => None,
    };
    deps.index = index.as_ref();
    deps.embedder = embedder.as_ref().map(|e| e as &dyn xlprompt::embedding::Embedder);
    let test = dataset.example(Split::Test, 0).unwrap().clone();
    deps.check(&strategy, &lang("en"), &test.lang)?;
    build_prompt(&deps, &strategy, &lang("en"), &test, case.k, case.seed)
}

pub fn criterion_goldens() -> Check {
    let mut diffs = Vec::new();
    for case in GOLDEN_CASES {
        let plan = render_golden_case(case).map_err(|e| format!("{}: {e}", case.name))?;
        if plan.final_text != golden_text(case.name) {
            diffs.push(case.name);
        }
    }
    ensure(diffs.is_empty(), format!("diffs in {diffs:?}"))?;
    Ok(format!("{} prompts byte-exact", GOLDEN_CASES.len()))
}

// ---------------------------------------------------------------------------
// Aligner strings

pub fn marc_spaces() -> BTreeMap<LanguageCode, LabelSpace> {
    [("en", ["bad", "good"]), ("es", ["malo", "bueno"]), ("fr", ["mal", "bien"])]
        .into_iter()
        .map(|(l, w)| (lang(l), LabelSpace::from_verbalizations(lang(l), &w).unwrap()))
        .collect()
}

pub const ALIGNER_CASES: &[(&str, &str, &str, &str)] = &[
    ("canonical", "en", "es", "In Española bad means malo and good means bueno."),
    ("canonical", "en", "fr", "In French bad means mal and good means bien."),
    ("incorrect", "en", "fr", "In French bad means bien and good means mal."),
    ("language_only", "en", "fr", "The following post is in French language"),
    ("third_language=es", "en", "fr", "In Spanish bad means malo and good means bueno."),
];

pub fn criterion_aligners() -> Check {
    let catalog = AlignerCatalog::builtin();
    let spaces = marc_spaces();
    let direct = render_aligner(&catalog, "marc", &lang("en"), &lang("es"), &spaces[&lang("en")], &spaces[&lang("es")])
        .map_err(|e| e.to_string())?;
    ensure(direct.text == ALIGNER_CASES[0].3, format!("render_aligner gave {:?}", direct.text))?;
    for (variant, src, tgt, expected) in ALIGNER_CASES {
        let v: AlignerVariant = variant.parse().map_err(|e: Error| e.to_string())?;
        let text = render_variant(&catalog, &v, "marc", &lang(src), &lang(tgt), &spaces)
            .map_err(|e| e.to_string())?
            .ok_or("variant produced no text")?
            .text;
        ensure(&text == expected, format!("{variant} {src}->{tgt}: {text:?}"))?;
    }
    Ok(format!("{} sentences exact", ALIGNER_CASES.len()))
}

// ---------------------------------------------------------------------------
// Macro-F1

pub struct F1Case {
    pub labels: &'static [&'static str],
    pub golds: &'static [&'static str],
    pub preds: &'static [&'static str],
    pub expected: f64,
}

const BIN: &[&str] = &["neg", "pos"];
const TRI: &[&str] = &["neg", "neu", "pos"];

/// Hand-computed expectations; per-label F1 = 2PR/(P+R), averaged over the
/// labels that occur in golds or predictions.
pub const F1_CASES: &[F1Case] = &[
    F1Case { labels: BIN, golds: &["pos", "pos", "neg", "neg"], preds: &["pos", "pos", "neg", "neg"], expected: 1.0 },
    // F1(pos) = 2/3, F1(neg) = 4/5
    F1Case { labels: BIN, golds: &["pos", "pos", "neg", "neg"], preds: &["pos", "neg", "neg", "neg"], expected: 11.0 / 15.0 },
    // All-one-class on balanced golds: (2/3 + 0) / 2
    F1Case { labels: BIN, golds: &["pos", "pos", "neg", "neg"], preds: &["pos", "pos", "pos", "pos"], expected: 1.0 / 3.0 },
    F1Case { labels: BIN, golds: &["pos", "pos", "neg", "neg"], preds: &["neg", "neg", "neg", "neg"], expected: 1.0 / 3.0 },
    F1Case { labels: BIN, golds: &["pos", "pos", "neg", "neg"], preds: &["neg", "neg", "pos", "pos"], expected: 0.0 },
    // tp=3 fn=1 fp=1 tn=5: F1(pos) = 3/4, F1(neg) = 5/6
    F1Case {
        labels: BIN,
        golds: &["pos", "pos", "pos", "pos", "neg", "neg", "neg", "neg", "neg", "neg"],
        preds: &["pos", "pos", "pos", "neg", "pos", "neg", "neg", "neg", "neg", "neg"],
        expected: 19.0 / 24.0,
    },
    F1Case { labels: BIN, golds: &["pos", "pos", "pos", "pos"], preds: &["pos", "pos", "pos", "pos"], expected: 1.0 },
    // F1(pos) = 2/3, neg only predicted: 0
    F1Case { labels: BIN, golds: &["pos", "pos", "pos", "pos"], preds: &["pos", "pos", "neg", "neg"], expected: 1.0 / 3.0 },
    F1Case { labels: BIN, golds: &["pos"], preds: &["pos"], expected: 1.0 },
    F1Case { labels: BIN, golds: &["pos"], preds: &["neg"], expected: 0.0 },
    // F1(pos) = 2/5, F1(neg) = 0
    F1Case { labels: BIN, golds: &["pos", "neg", "neg", "neg"], preds: &["pos", "pos", "pos", "pos"], expected: 0.2 },
    // F1(pos) = 0, F1(neg) = 6/7
    F1Case { labels: BIN, golds: &["pos", "neg", "neg", "neg"], preds: &["neg", "neg", "neg", "neg"], expected: 3.0 / 7.0 },
    // tp=2 fn=3 fp=1 tn=4: F1(pos) = 1/2, F1(neg) = 2/3
    F1Case {
        labels: BIN,
        golds: &["pos", "pos", "pos", "pos", "pos", "neg", "neg", "neg", "neg", "neg"],
        preds: &["pos", "pos", "neg", "neg", "neg", "pos", "neg", "neg", "neg", "neg"],
        expected: 7.0 / 12.0,
    },
    F1Case { labels: TRI, golds: &["neg", "neu", "pos"], preds: &["neg", "neu", "pos"], expected: 1.0 },
    // Each label: P = R = 1/2
    F1Case {
        labels: TRI,
        golds: &["neg", "neg", "neu", "neu", "pos", "pos"],
        preds: &["neg", "neu", "neu", "pos", "pos", "neg"],
        expected: 0.5,
    },
    // F1(neg) = 1/2, others 0
    F1Case {
        labels: TRI,
        golds: &["neg", "neg", "neu", "neu", "pos", "pos"],
        preds: &["neg", "neg", "neg", "neg", "neg", "neg"],
        expected: 1.0 / 6.0,
    },
    // F1(neg) = 2/3, others 0
    F1Case { labels: TRI, golds: &["neg", "neu", "pos", "neg"], preds: &["neg", "neg", "neg", "neg"], expected: 2.0 / 9.0 },
    // pos absent from both; F1(neg) = 4/5, F1(neu) = 2/3
    F1Case { labels: TRI, golds: &["neg", "neg", "neg", "neu"], preds: &["neg", "neg", "neu", "neu"], expected: 11.0 / 15.0 },
    // F1(neg) = 0, F1(neu) = 1, F1(pos) = 2/3
    F1Case {
        labels: TRI,
        golds: &["neg", "neu", "pos", "pos", "pos"],
        preds: &["pos", "neu", "pos", "neg", "pos"],
        expected: 5.0 / 9.0,
    },
    F1Case { labels: TRI, golds: &["neu", "neu"], preds: &["neu", "neu"], expected: 1.0 },
];

pub fn space_of(labels: &[&str]) -> LabelSpace {
    LabelSpace::new(
        lang("en"),
        labels
            .iter()
            .map(|l| xlprompt::corpus::Label { id: l.to_string(), verbalization: format!("v_{l}") })
            .collect(),
    )
    .unwrap()
}

pub fn criterion_macro_f1() -> Check {
    for (i, case) in F1_CASES.iter().enumerate() {
        let got = macro_f1(case.preds, case.golds, &space_of(case.labels)).map_err(|e| e.to_string())?;
        ensure((got - case.expected).abs() < 1e-9, format!("case {i}: {got} != {}", case.expected))?;
    }
    let collapsed = macro_f1(F1_CASES[2].preds, F1_CASES[2].golds, &space_of(BIN)).unwrap();
    ensure((collapsed - 0.333).abs() < 1e-3, format!("collapsed case gave {collapsed}"))?;
    Ok(format!("{} cases within 1e-9; one-class case {collapsed:.3}", F1_CASES.len()))
}

// ---------------------------------------------------------------------------
// Experiment grids on the keyword corpus

/// Writes a generated corpus named `marc` (so built-in verbalizers and
/// aligners apply) plus a config, and returns the config path.
pub fn write_grid(dir: &Path, strategies: &[&str], targets: &[&str], scorer: &str) -> PathBuf {
    let mut spec = SyntheticSpec::binary(11, 200, 200);
    spec.name = "marc".into();
    let corpus = generate(&spec).unwrap();
    corpus.write_to(dir).unwrap();
    let lexicon: Vec<String> = corpus
        .lexicon
        .iter()
        .map(|(id, words)| {
            let quoted: Vec<String> = words.iter().map(|w| format!("\"{w}\"")).collect();
            format!("{id} = [{}]", quoted.join(", "))
        })
        .collect();
    let list = |xs: &[&str]| xs.iter().map(|x| format!("\"{x}\"")).collect::<Vec<_>>().join(", ");
    let config = format!(
        "dataset = \"marc.toml\"\nstrategies = [{}]\nsources = [\"en\"]\ntargets = [{}]\nseeds = [32, 5, 232, 100, 42]\nk = 4\nmax_tokens = 1024\nworkers = 4\n\n[scorer]\nkind = \"mock\"\nmode = \"{scorer}\"\nkey = \"grid\"\n\n[scorer.lexicon]\n{}\n",
        list(strategies),
        list(targets),
        lexicon.join("\n")
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, config).unwrap();
    path
}

pub fn run_grid(config_path: &Path, overrides: &[String], out: &Path) -> xlprompt::Result<ExperimentReport> {
    let config = ExperimentConfig::load(config_path, overrides)?;
    let res = Resources::from_config(&config)?;
    let report = run_experiment(&config, &res, &RunOptions { out_dir: Some(out.to_path_buf()), interrupt: None })?;
    res.scorer.save()?;
    emit_all(&report, out)?;
    Ok(report)
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot_dir(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn criterion_determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_grid(tmp.path(), &["random", "semantic"], &["es", "fr"], "hash");
    let start = Instant::now();
    let a = run_grid(&config, &[], &tmp.path().join("run_a")).map_err(|e| e.to_string())?;
    let b = run_grid(&config, &[], &tmp.path().join("run_b")).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(a == b, "reports differ between runs")?;
    ensure(a.cells.len() == 4, format!("expected 4 cells, got {}", a.cells.len()))?;
    ensure(a.cells.iter().all(|c| c.per_seed.len() == 5 && c.examples == 200), "cell shape")?;
    let (sa, sb) = (snapshot_dir(&tmp.path().join("run_a")), snapshot_dir(&tmp.path().join("run_b")));
    ensure(sa.len() == 7, format!("expected 3 reports and 4 audit files, got {}", sa.len()))?;
    ensure(sa == sb, "outputs differ between runs")?;
    ensure(elapsed.as_secs_f64() < 60.0, format!("two runs took {elapsed:?}"))?;
    Ok(format!("{} files byte-identical across two runs ({elapsed:.2?})", sa.len()))
}

pub fn criterion_separation() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_grid(tmp.path(), &["random", "semantic"], &["es", "fr"], "keyword");
    let report = run_grid(&config, &[], &tmp.path().join("out")).map_err(|e| e.to_string())?;
    let random: Strategy = "random".parse().unwrap();
    let semantic: Strategy = "semantic".parse().unwrap();
    let mut margins = Vec::new();
    for target in ["es", "fr"] {
        let r = report.cell(&random, &lang("en"), &lang(target)).ok_or("missing random cell")?;
        let s = report.cell(&semantic, &lang("en"), &lang(target)).ok_or("missing semantic cell")?;
        ensure(r.per_seed.len() == 5 && s.per_seed.len() == 5, "seed count")?;
        for (i, (rv, sv)) in r.per_seed.iter().zip(&s.per_seed).enumerate() {
            ensure(sv > rv, format!("en->{target} seed #{i}: semantic {sv} <= random {rv}"))?;
            margins.push(sv - rv);
        }
    }
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("semantic > random in all {} seed cells (min margin {min:.3})", margins.len()))
}

pub fn read_audit(out: &Path, report: &ExperimentReport) -> Vec<serde_json::Value> {
    report
        .cells
        .iter()
        .filter_map(|c| c.audit.as_ref())
        .flat_map(|rel| {
            fs::read_to_string(out.join(rel))
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn criterion_uniform_audit() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let strategies = [
        "random",
        "random:uniform_label_space",
        "semantic",
        "task_aligned",
        "task_aligned:uniform_label_space",
        "task_aligned:incorrect",
        "task_aligned:language_only",
        "x_insta",
        "x_insta:uniform_label_space",
    ];
    let config = write_grid(tmp.path(), &strategies, &["es", "fr"], "hash");
    let overrides = vec!["seeds=[32, 5]".to_string(), "test_subset=40".to_string()];
    let mut records = Vec::new();
    let out = tmp.path().join("out");
    let report = run_grid(&config, &overrides, &out).map_err(|e| e.to_string())?;
    ensure(report.failed_cells() == 0, "grid had failed cells")?;
    records.extend(read_audit(&out, &report));
    let mut third = overrides.clone();
    third.push("strategies=[\"task_aligned:third_language=fr\"]".into());
    third.push("targets=[\"es\"]".into());
    let out3 = tmp.path().join("out3");
    let report3 = run_grid(&config, &third, &out3).map_err(|e| e.to_string())?;
    ensure(report3.failed_cells() == 0, "third-language grid failed")?;
    records.extend(read_audit(&out3, &report3));

    let spaces = marc_spaces();
    let words = |l: &str| spaces[&lang(l)].verbalizations();
    let (mut uniform, mut other) = (0, 0);
    for r in &records {
        let strategy = r["strategy"].as_str().unwrap();
        let candidates: Vec<String> =
            r["candidates"].as_array().unwrap().iter().map(|c| c.as_str().unwrap().to_string()).collect();
        let expected = if strategy.ends_with(":uniform_label_space") {
            uniform += 1;
            words(r["source"].as_str().unwrap())
        } else {
            other += 1;
            words(r["target"].as_str().unwrap())
        };
        ensure(candidates == expected, format!("{strategy}: candidates {candidates:?}"))?;
    }
    ensure(uniform > 0 && other > 0, "both kinds of records expected")?;
    Ok(format!("{uniform} uniform records use source labels, {other} others use target labels"))
}

// ---------------------------------------------------------------------------
// Budget

pub const BUDGET: usize = 1024;

fn words(prefix: &str, n: usize) -> String {
    (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" ")
}

/// English training examples of the given lengths with fixed similarity
/// to a Spanish test input of `test_words` words.
pub fn budget_fixture(lengths: &[usize], scores: &[f32], test_words: usize) -> (Dataset, PrecomputedEmbedder) {
    let mut train = Vec::new();
    let mut table = HashMap::new();
    for (i, (&n, &s)) in lengths.iter().zip(scores).enumerate() {
        let text = words(&format!("d{i}w"), n);
        table.insert(text.clone(), Vector::new(vec![s, (1.0 - s * s).sqrt()]).unwrap());
        train.push(LabeledExample { id: i, text, label: "positive".into(), lang: lang("en") });
    }
    let test_text = words("t", test_words);
    table.insert(test_text.clone(), Vector::new(vec![1.0, 0.0]).unwrap());
    let test = vec![LabeledExample { id: 0, text: test_text, label: "negative".into(), lang: lang("es") }];
    let descriptor = xlprompt::corpus::DatasetDescriptor {
        name: "marc".into(),
        languages: vec!["en".into(), "es".into()],
        label_ids: Some(vec!["negative".into(), "positive".into()]),
        verbalizations: [("en", ["bad", "good"]), ("es", ["malo", "bueno"])]
            .into_iter()
            .map(|(l, w)| (l.to_string(), w.iter().map(|s| s.to_string()).collect()))
            .collect(),
        ..Default::default()
    };
    let splits = [(Split::Train, train), (Split::Test, test)].into_iter().collect();
    let dataset = Dataset::new(
        "marc",
        descriptor.language_codes().unwrap(),
        descriptor.label_spaces().unwrap(),
        splits,
    );
    (dataset, PrecomputedEmbedder::new("budget", table))
}

pub fn plan_budget(
    dataset: &Dataset,
    embedder: &PrecomputedEmbedder,
    strategy: &str,
    k: usize,
) -> xlprompt::Result<xlprompt::prompt::PromptPlan> {
    let verbalizers = VerbalizerRegistry::builtin();
    let catalog = AlignerCatalog::builtin();
    let config = PromptConfig::default();
    let train: Vec<LabeledExample> = dataset.examples(Split::Train).to_vec();
    let index = EmbeddingIndex::build(&train, embedder, BuildOptions::default())?;
    let mut deps = PromptDeps::new(dataset, &verbalizers, &config);
    deps.catalog = Some(&catalog);
    deps.index = Some(&index);
    deps.embedder = Some(embedder);
    let strategy: Strategy = strategy.parse()?;
    let test = dataset.example(Split::Test, 0).unwrap().clone();
    let plan = build_prompt(&deps, &strategy, &lang("en"), &test, k, 1)?;
    enforce_budget(plan, BUDGET, &WordCountCounter, BudgetPolicy::LowestSimilarityFirst)
}

/// Tokens as the budget defines them: whitespace words times 1.3, rounded up.
pub fn oracle_tokens(text: &str) -> usize {
    let w = text.split_whitespace().count() as f64;
    (w * 1.3 - 1e-9).ceil() as usize
}

pub fn criterion_budget() -> Check {
    // Demonstrations in retrieval order carry scores 0.9, 0.7, 0.5, 0.3.
    let lengths = [320, 300, 280, 260];
    let scores = [0.9f32, 0.7, 0.5, 0.3];
    let (dataset, embedder) = budget_fixture(&lengths, &scores, 2);
    let plan = plan_budget(&dataset, &embedder, "semantic", 4).map_err(|e| e.to_string())?;
    // The first separator stands alone, later ones attach to a word; the test
    // rendering adds its text plus two prefixes.
    let words_for = |kept: &[usize]| 1 + kept.iter().map(|&i| lengths[i] + 3).sum::<usize>() + 2 + 2;
    let mut kept: Vec<usize> = vec![0, 1, 2, 3];
    while oracle_tokens(&"x ".repeat(words_for(&kept))) > BUDGET {
        let lowest = *kept.iter().min_by(|a, b| scores[**a].partial_cmp(&scores[**b]).unwrap()).unwrap();
        kept.retain(|&i| i != lowest);
    }
    ensure(plan.demo_ids() == kept, format!("kept {:?}, oracle {kept:?}", plan.demo_ids()))?;
    ensure(plan.dropped == 4 - kept.len(), "dropped count")?;
    ensure(oracle_tokens(&plan.final_text) == plan.token_count, "token count disagrees with oracle")?;
    ensure(plan.token_count <= BUDGET, "over budget")?;
    ensure(plan.final_text.ends_with("Clasificación:"), "test input missing")?;

    // The aligner stays even when demonstrations go.
    let aligned = plan_budget(&dataset, &embedder, "x_insta", 4).map_err(|e| e.to_string())?;
    ensure(aligned.aligner.is_some() && aligned.token_count <= BUDGET, "x_insta plan lost its aligner")?;

    // A zero-demonstration prompt that still does not fit is the only error.
    let (big, big_embedder) = budget_fixture(&lengths, &scores, 800);
    match plan_budget(&big, &big_embedder, "semantic", 4) {
        Err(Error::Unrepresentable { tokens, budget: 1024, .. }) => {
            ensure(tokens == oracle_tokens(&format!("Revisar: {} Clasificación:", words("t", 800))), "token count")?
        }
        other => return Err(format!("expected an unrepresentable prompt, got {other:?}")),
    }
    let (fits, fits_embedder) = budget_fixture(&lengths, &scores, 780);
    let alone = plan_budget(&fits, &fits_embedder, "semantic", 4).map_err(|e| e.to_string())?;
    ensure(alone.demonstrations.is_empty() && alone.token_count <= BUDGET, "780-word input should fit alone")?;
    Ok(format!("kept {kept:?} of 4 demos at {} tokens; oversized input rejected", plan.token_count))
}

// ---------------------------------------------------------------------------
// Mock HTTP service

pub type Handler = dyn Fn(&str, &serde_json::Value) -> (u16, String) + Send + Sync;

pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

/// Serves `handler` on a loopback port, one request per connection.
pub fn serve(handler: Arc<Handler>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let handler = Arc::clone(&handler);
            let counter = Arc::clone(&counter);
            thread::spawn(move || {
                let mut reader = BufReader::new(stream);
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                    return;
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; length];
                if reader.read_exact(&mut body).is_err() {
                    return;
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let value: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
                let (status, text) = handler(&path, &value);
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let stream = reader.get_mut();
                let _ = stream.write_all(response.as_bytes());
                let _ = stream.flush();
            });
        }
    });
    MockServer { url, hits }
}

/// A scoring service that favours the first candidate sharing a character
/// with the prompt's last word.
pub fn scoring_service() -> MockServer {
    serve(Arc::new(|path: &str, body: &serde_json::Value| {
        if path != "/score" {
            return (404, "{}".into());
        }
        let prompt = body["prompt"].as_str().unwrap_or("");
        let candidates = body["candidates"].as_array().cloned().unwrap_or_default();
        let h = prompt.len() as f64;
        let log_probs: Vec<f64> =
            candidates.iter().enumerate().map(|(i, _)| -((h + i as f64 * 7.0) % 5.0) - 0.1).collect();
        (200, serde_json::json!({"log_probs": log_probs, "model": "mock-lm"}).to_string())
    }))
}

pub fn criterion_replay() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_grid(tmp.path(), &["random", "semantic"], &["es", "fr"], "hash");
    let server = scoring_service();
    let live = vec![
        "scorer={kind = \"http\", endpoint = {url = \"URL\"}}".replace("URL", &server.url),
        "cache=\"cache.json\"".into(),
        "test_subset=30".into(),
        "seeds=[32, 5]".into(),
    ];
    let first = run_grid(&config, &live, &tmp.path().join("live")).map_err(|e| e.to_string())?;
    ensure(first.failed_cells() == 0, "live run had failures")?;
    let primed = server.hits.load(Ordering::SeqCst);
    ensure(primed > 0, "live run made no requests")?;
    let mut offline = live.clone();
    offline.push("offline=true".into());
    let second = run_grid(&config, &offline, &tmp.path().join("replay")).map_err(|e| e.to_string())?;
    let after = server.hits.load(Ordering::SeqCst);
    ensure(after == primed, format!("offline rerun sent {} requests", after - primed))?;
    ensure(second.failed_cells() == 0, "offline run had failures")?;
    let digest = |dir: &str| fs::read(tmp.path().join(dir).join("report.json")).unwrap();
    ensure(digest("live") == digest("replay"), "report differs after replay")?;
    ensure(
        snapshot_dir(&tmp.path().join("live")) == snapshot_dir(&tmp.path().join("replay")),
        "audit trails differ after replay",
    )?;
    Ok(format!("{primed} live requests, 0 on replay, identical reports"))
}
