use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use xlprompt::corpus::{read_records, summarize, write_records_file, DatasetDescriptor, LanguageCode, RecordSchema, Split};
use xlprompt::embedding::{BuildOptions, Embedder, EmbeddingIndex, HashingEmbedder, HttpEmbedder, PrecomputedEmbedder};
use xlprompt::eval::{
    emit_all, emit_report, render_report, run_experiment, single_prompt, ExperimentConfig, ExperimentReport, MockKind, ReportFormat,
    Resources, RunOptions,
};
use xlprompt::synthetic::{generate, SyntheticSpec};
use xlprompt::prompt::Strategy;
use xlprompt::{EndpointConfig, Error, Result};

/// Cross-lingual in-context learning: build prompts, run experiment grids,
/// render macro-F1 reports.
#[derive(Parser, Debug)]
#[command(name = "xlprompt", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a JSONL split against a dataset descriptor and write it in canonical form.
    Ingest(IngestArgs),
    /// Embed one language's training examples and write an index file.
    Index(IndexArgs),
    /// Print the prompt a strategy builds for one test example.
    ShowPrompt(ShowPromptArgs),
    /// Run an experiment grid and write reports and audit trails.
    Run(RunArgs),
    /// Re-render a JSON report as text, CSV or JSON.
    Report(ReportArgs),
    /// Write a generated keyword corpus and a mock-scorer config for it.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training examples per language.
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Test examples per language.
    #[arg(long, default_value_t = 200)]
    test: usize,
    /// Directory to write into.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Dataset descriptor (TOML).
    #[arg(long)]
    descriptor: PathBuf,
    /// JSONL records to validate.
    #[arg(long)]
    input: PathBuf,
    /// Where to write the canonical records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Dataset descriptor (TOML).
    #[arg(long)]
    dataset: PathBuf,
    /// Language whose training examples are indexed.
    #[arg(long)]
    lang: String,
    /// Embedder: `hashing`, `precomputed` (needs --vectors) or `http` (needs --endpoint).
    #[arg(long, default_value = "hashing")]
    embedder: String,
    /// Dimension of the hashing embedder.
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// JSONL table of precomputed vectors.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Base URL of an embedding service.
    #[arg(long)]
    endpoint: Option<String>,
    /// Index file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set k=2` or `--set scorer.mode=keyword`; repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Demonstrations per prompt.
    #[arg(long)]
    k: Option<usize>,
    /// Token budget per prompt.
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Use a mock scorer instead of the configured one.
    #[arg(long, value_parser = ["hash", "keyword"])]
    mock_scorer: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config, &self.overrides)?;
        if let Some(k) = self.k {
            config.k = k;
        }
        if let Some(m) = self.max_tokens {
            config.max_tokens = m;
        }
        if let Some(mode) = &self.mock_scorer {
            let mode: MockKind = mode.parse()?;
            config.scorer = match config.scorer {
                xlprompt::eval::ScorerConfig::Mock { key, lexicon, .. } => {
                    xlprompt::eval::ScorerConfig::Mock { mode, key, lexicon }
                }
                _ => xlprompt::eval::ScorerConfig::Mock { mode, key: String::new(), lexicon: Default::default() },
            };
        }
        config.validate()?;
        Ok(config)
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct ShowPromptArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Strategy, optionally with an aligner variant (e.g. `task_aligned:incorrect`).
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    /// Id of the test example; its language is the target language.
    #[arg(long)]
    test_id: usize,
    /// Source language of the demonstrations; defaults to the config's first source.
    #[arg(long)]
    source: Option<String>,
    /// Seed for random demonstration sampling.
    #[arg(long, default_value_t = 32)]
    seed: u64,
    /// Print the full plan as JSON instead of the text view.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds, replacing the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Serve scores from the replay cache only; a miss fails the cell.
    #[arg(long)]
    offline: bool,
    /// Output directory for reports and audit trails.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A `report.json` written by `run`.
    #[arg(long)]
    input: PathBuf,
    /// Output format: text, csv or json.
    #[arg(long, default_value = "text", value_parser = ["text", "csv", "json"])]
    format: String,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Ingest(args) => ingest(args),
        Command::Index(args) => index(args),
        Command::ShowPrompt(args) => show_prompt(args),
        Command::Run(args) => run(args),
        Command::Report(args) => report(args),
        Command::Synth(args) => synth(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn ingest(args: IngestArgs) -> Result<ExitCode> {
    let descriptor = DatasetDescriptor::from_file(&args.descriptor)?;
    let schema = RecordSchema::from_descriptor(&descriptor)?;
    let records = read_records(&args.input, &schema)?;
    write_records_file(&args.out, &records)?;
    if records.is_empty() {
        eprintln!("warning: {} contains no records", args.input.display());
    }
    println!("{} records", records.len());
    for ((lang, label), n) in summarize(&records) {
        println!("  {lang} {label}: {n}");
    }
    Ok(ExitCode::SUCCESS)
}

fn index(args: IndexArgs) -> Result<ExitCode> {
    let descriptor = DatasetDescriptor::from_file(&args.dataset)?;
    let base = args.dataset.parent().unwrap_or_else(|| Path::new("."));
    let dataset = xlprompt::corpus::load_dataset(base, &descriptor)?;
    let lang = descriptor.registry()?.resolve(&args.lang)?;
    let embedder: Box<dyn Embedder> = match args.embedder.as_str() {
        "hashing" => Box::new(HashingEmbedder::new(args.dim)),
        "precomputed" => {
            let path = args.vectors.as_ref().ok_or_else(|| Error::InvalidArgument("--vectors is required".into()))?;
            Box::new(PrecomputedEmbedder::from_jsonl(path)?)
        }
        "http" => {
            let url = args.endpoint.as_ref().ok_or_else(|| Error::InvalidArgument("--endpoint is required".into()))?;
            Box::new(HttpEmbedder::new(EndpointConfig::new(url.clone()), None))
        }
        other => return Err(Error::InvalidArgument(format!("unknown embedder `{other}` (hashing, precomputed, http)"))),
    };
    let examples: Vec<_> = dataset.examples_in(Split::Train, &lang).into_iter().cloned().collect();
    let index = EmbeddingIndex::build(&examples, embedder.as_ref(), BuildOptions::default())?;
    if args.out.exists() {
        let existing = EmbeddingIndex::peek_dim(&args.out)?;
        if existing != index.dim() {
            return Err(Error::InvalidArgument(format!(
                "{} holds a {existing}-dimensional index; refusing to overwrite it with {} dimensions",
                args.out.display(),
                index.dim()
            )));
        }
    }
    index.save(&args.out)?;
    println!("{} vectors, dim {}, fingerprint {}", index.len(), index.dim(), index.fingerprint());
    Ok(ExitCode::SUCCESS)
}

fn show_prompt(args: ShowPromptArgs) -> Result<ExitCode> {
    let config = args.config.load()?;
    let res = Resources::from_config(&config)?;
    let source: Option<LanguageCode> = args.source.as_deref().map(str::parse).transpose()?;
    let plan = single_prompt(&config, &res, &args.strategy, args.test_id, source.as_ref(), args.seed)?;
    let mut out = std::io::stdout().lock();
    if args.json {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&plan)?);
        return Ok(ExitCode::SUCCESS);
    }
    let _ = writeln!(out, "{}", plan.final_text);
    let _ = writeln!(out, "---");
    let _ = writeln!(out, "strategy: {}  {} -> {}", plan.strategy, plan.source, plan.target);
    for demo in &plan.demonstrations {
        match demo.score {
            Some(s) => {
                let _ = writeln!(out, "demo {} score {s:.6}", demo.example.id);
            }
            None => {
                let _ = writeln!(out, "demo {}", demo.example.id);
            }
        }
    }
    match &plan.aligner {
        Some(a) => {
            let _ = writeln!(out, "aligner: {}", a.text);
        }
        None => {
            let _ = writeln!(out, "aligner: none");
        }
    }
    let _ = writeln!(out, "tokens: {} / {} (dropped {})", plan.token_count, config.max_tokens, plan.dropped);
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let mut config = args.config.load()?;
    if let Some(seeds) = args.seed_list {
        config.seeds = seeds;
    }
    if args.offline {
        config.offline = true;
    }
    if let Some(out) = args.out {
        config.out = Some(out);
    }
    config.validate()?;
    let out_dir = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let res = Resources::from_config(&config)?;
    for warning in res.dataset.warnings() {
        eprintln!("warning: {warning}");
    }
    let interrupt = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&interrupt);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    let options = RunOptions { out_dir: Some(out_dir.clone()), interrupt: Some(Arc::clone(&interrupt)) };
    let report = run_experiment(&config, &res, &options)?;
    res.scorer.save()?;
    emit_all(&report, &out_dir)?;
    print!("{}", render_report(&report, ReportFormat::Text));
    eprintln!(
        "scored {} request(s), {} from cache; reports in {}",
        res.scorer.forwarded() + res.scorer.hits(),
        res.scorer.hits(),
        out_dir.display()
    );
    if interrupt.load(Ordering::SeqCst) {
        eprintln!("interrupted; completed cells were written");
    }
    Ok(if report.failed_cells() > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let raw = fs::read_to_string(&args.input).map_err(|e| Error::Io { path: args.input.clone(), source: e })?;
    let report = ExperimentReport::from_json(&raw)?;
    let format: ReportFormat = args.format.parse()?;
    match &args.out {
        Some(path) => emit_report(&report, format, path)?,
        None => print!("{}", render_report(&report, format)),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(args: SynthArgs) -> Result<ExitCode> {
    let corpus = generate(&SyntheticSpec::binary(args.seed, args.train, args.test))?;
    let descriptor = corpus.write_to(&args.out)?;
    let mut config = toml::Table::new();
    let name = descriptor.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    config.insert("dataset".into(), name.into());
    config.insert("strategies".into(), toml::Value::Array(vec!["random".into(), "semantic".into()]));
    config.insert("sources".into(), toml::Value::Array(vec!["en".into()]));
    config.insert("targets".into(), toml::Value::Array(vec!["es".into(), "fr".into()]));
    config.insert("verbalizers".into(), "verbalizers.toml".into());
    let mut scorer = toml::Table::new();
    scorer.insert("kind".into(), "mock".into());
    scorer.insert("mode".into(), "keyword".into());
    let lexicon: toml::Table = corpus
        .lexicon
        .iter()
        .map(|(id, words)| (id.clone(), toml::Value::Array(words.iter().map(|w| w.as_str().into()).collect())))
        .collect();
    scorer.insert("lexicon".into(), lexicon.into());
    config.insert("scorer".into(), scorer.into());
    let path = args.out.join("experiment.toml");
    let body = toml::to_string(&config).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(&path, body).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let verbalizers = args.out.join("verbalizers.toml");
    let mut prefixes = String::new();
    for lang in ["en", "es", "fr"] {
        prefixes.push_str(&format!("[{}.{lang}]\ninput_prefix = \"Input:\"\nlabel_prefix = \"Label:\"\n\n", corpus.descriptor.name));
    }
    fs::write(&verbalizers, prefixes).map_err(|e| Error::Io { path: verbalizers.clone(), source: e })?;
    println!("wrote {}, {} and {}", descriptor.display(), verbalizers.display(), path.display());
    Ok(ExitCode::SUCCESS)
}
