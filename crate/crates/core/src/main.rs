use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use qe_icl::backends::{
    estimator_from_spec, synthesize_qe_labels, translator_from_spec, Estimator, HttpOptions, ReferenceTable,
    RetryPolicy, Retrying, Translator,
};
use qe_icl::corpus::{load_split, tokenize_words, Corpus, Split};
use qe_icl::prompt::PromptTemplate;
use qe_icl::retriever::{load_or_build_index, Bm25Params, CoverageWeighting};
use qe_icl::runner::{
    compare_reports, read_report, verify_report, write_report, Experiment, Method, MethodSpec, RunError,
};
use qe_icl::search::{SearchConfig, SearchMode};
use qe_icl::synthetic::{self, SyntheticConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;
const EXIT_FAILURE_RATE: u8 = 4;
/// Runs with more failed items than this fraction exit with [`EXIT_FAILURE_RATE`].
const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Parser)]
#[command(
    name = "qe-icl",
    version,
    about = "QE-guided in-context example selection for LLM translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or refresh) the cached BM25 index over the train sources.
    Index(IndexArgs),
    /// Translate the test split with one selection method and write a report.
    Run(Box<RunArgs>),
    /// Write QE training data: zero-shot translations labelled with sentence BLEU.
    SynthQe(SynthQeArgs),
    /// Generate a synthetic dictionary-based parallel corpus.
    SynthCorpus(SynthCorpusArgs),
    /// Inspect run reports.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Args)]
struct IndexArgs {
    /// Corpus directory (`train.src`/`train.tgt` or `train.tsv`).
    #[arg(long)]
    data: PathBuf,
    /// Cache file; defaults to `<data>/bm25.idx`.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Random,
    TaskLevel,
    Bm25,
    Rbm25,
    Search,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Random => Method::Random,
            MethodArg::TaskLevel => Method::TaskLevel,
            MethodArg::Bm25 => Method::Bm25,
            MethodArg::Rbm25 => Method::RBm25,
            MethodArg::Search => Method::Search,
        }
    }
}

/// Every run setting. Loaded from the `--config` TOML file and then
/// overridden field by field by command-line flags.
#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct RunSettings {
    /// Corpus directory with train/dev/test splits.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Selection method; defaults to `search` when `--mode` is given.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Search mode: 1 = QE over BM25 order, 2 = QE over unigram order, 3 = oracle BLEU.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    mode: Option<u8>,
    /// Consecutive non-improving iterations before the search stops.
    #[arg(long)]
    patience: Option<usize>,
    /// Maximum number of search iterations (candidates tried).
    #[arg(long)]
    k: Option<usize>,
    /// BM25 hits handed to the search.
    #[arg(long)]
    retriever_top: Option<usize>,
    /// Randomly sampled examples (random/task-level baselines).
    #[arg(long)]
    p: Option<usize>,
    /// Retrieved examples (BM25/R-BM25 baselines).
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Translator spec: `mock:coverage`, `mock:reference`, `mock:echo`, `mock:fixed:<text>` or a URL.
    #[arg(long)]
    translator: Option<String>,
    #[arg(long, env = "QE_ICL_TRANSLATOR_URL")]
    translator_url: Option<String>,
    /// Estimator spec: `mock:oracle`, `mock:noisy:<sigma>[:<seed>]` or a URL.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long, env = "QE_ICL_QE_URL")]
    qe_url: Option<String>,
    /// Concurrent test items (and in-flight backend requests).
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_prompt_tokens: Option<usize>,
    /// Score at or above which the search stops early.
    #[arg(long)]
    termination_score: Option<f64>,
    /// R-BM25 re-ranking pool size.
    #[arg(long)]
    rbm25_pool: Option<usize>,
    #[arg(long)]
    rbm25_max_ngram: Option<usize>,
    /// BM25 index cache file.
    #[arg(long)]
    index_cache: Option<PathBuf>,
    /// Per-request HTTP timeout in seconds.
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Retries per backend call on transport errors, HTTP 429 and 5xx.
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(skip)]
    rbm25_weighting: Option<CoverageWeighting>,
    #[arg(skip)]
    template: Option<PromptTemplate>,
    #[arg(skip)]
    bm25: Option<Bm25Params>,
}

macro_rules! override_fields {
    ($base:expr, $over:expr, $($field:ident),* $(,)?) => {
        $( if $over.$field.is_some() { $base.$field = $over.$field; } )*
    };
}

impl RunSettings {
    fn merge(mut self, flags: RunSettings) -> RunSettings {
        override_fields!(
            self,
            flags,
            data,
            out,
            method,
            mode,
            patience,
            k,
            retriever_top,
            p,
            q,
            trials,
            seed,
            translator,
            translator_url,
            estimator,
            qe_url,
            parallelism,
            max_prompt_tokens,
            termination_score,
            rbm25_pool,
            rbm25_max_ngram,
            index_cache,
            timeout_secs,
            max_retries
        );
        self
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with the same keys as the flags (kebab-case), plus optional
    /// `rbm25-weighting`, `[template]` and `[bm25]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: RunSettings,
}

#[derive(Args)]
struct SynthQeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output JSONL file; `-` for stdout.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sample_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    translator: Option<String>,
    #[arg(long, env = "QE_ICL_TRANSLATOR_URL")]
    translator_url: Option<String>,
}

#[derive(Args)]
struct SynthCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    dev: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 400)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Recompute corpus BLEU from the stored translations and references.
    Verify {
        report: PathBuf,
        #[command(flatten)]
        refs: RefArgs,
    },
    /// BLEU difference and KS test on output lengths between two reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        refs: RefArgs,
    },
}

#[derive(Args)]
struct RefArgs {
    /// Reference file, one segment per line.
    #[arg(long, conflicts_with = "data")]
    references: Option<PathBuf>,
    /// Corpus directory whose test targets are the references.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(args) => index(args),
        Command::Run(args) => run(*args),
        Command::SynthQe(args) => synth_qe(args),
        Command::SynthCorpus(args) => synth_corpus(args),
        Command::Report(cmd) => report(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    Corpus::load_dir(dir)
        .with_context(|| format!("loading corpus from {}", dir.display()))
        .map_err(Failure::config)
}

fn index(args: IndexArgs) -> CliResult {
    let train = load_split(&args.data, Split::Train).map_err(Failure::config)?;
    let defaults = Bm25Params::default();
    let params = Bm25Params {
        k1: args.k1.unwrap_or(defaults.k1),
        b: args.b.unwrap_or(defaults.b),
        ..defaults
    };
    let cache = args.cache.unwrap_or_else(|| args.data.join("bm25.idx"));
    let tokens: Vec<Vec<String>> = train.iter().map(|p| tokenize_words(&p.source)).collect();
    let index = load_or_build_index(Some(&cache), &train, &tokens, params).map_err(Failure::config)?;
    log::info!(
        "BM25 index over {} documents cached at {}",
        index.len(),
        cache.display()
    );
    Ok(())
}

fn backend_spec(name: &str, spec: Option<String>, url: Option<String>) -> Result<Option<String>, Failure> {
    match (spec, url) {
        (Some(_), Some(_)) => Err(Failure::config(anyhow::anyhow!(
            "give either --{name} or --{name}-url, not both"
        ))),
        (s, u) => Ok(s.or(u)),
    }
}

fn reference_table(corpus: &Corpus) -> Arc<ReferenceTable> {
    Arc::new(ReferenceTable::from_pairs(
        corpus.test.iter().chain(&corpus.dev).chain(&corpus.train),
    ))
}

fn build_spec(s: &RunSettings) -> Result<MethodSpec, Failure> {
    let method: Method = match (s.method, s.mode) {
        (Some(m), _) => m.into(),
        (None, Some(_)) => Method::Search,
        (None, None) => {
            return Err(Failure::config(anyhow::anyhow!(
                "choose a method with --method or a search --mode"
            )))
        }
    };
    let seed = s.seed.unwrap_or(0);
    let mut spec = match method {
        Method::Random => MethodSpec::random(s.p.unwrap_or(16), seed),
        Method::TaskLevel => MethodSpec::task_level(s.p.unwrap_or(16), seed),
        Method::Bm25 => MethodSpec::bm25(s.q.unwrap_or(16)),
        Method::RBm25 => MethodSpec::rbm25(s.q.unwrap_or(16)),
        Method::Search => {
            let mode = s.mode.unwrap_or(1);
            let defaults = SearchConfig::default();
            let config = SearchConfig {
                mode: SearchMode::from_number(mode).expect("clap checks the range"),
                max_candidates: s.k.unwrap_or(defaults.max_candidates),
                patience: s.patience.unwrap_or(defaults.patience),
                termination_score: s.termination_score.unwrap_or(defaults.termination_score),
                max_prompt_tokens: s.max_prompt_tokens.unwrap_or(defaults.max_prompt_tokens),
            };
            MethodSpec::search(config)
        }
    };
    if method != Method::Search && (s.mode.is_some() || s.k.is_some() || s.patience.is_some()) {
        return Err(Failure::config(anyhow::anyhow!(
            "--mode, --k and --patience only apply to the search method"
        )));
    }
    if matches!(method, Method::Random | Method::TaskLevel) && s.q.is_some_and(|q| q != 0) {
        return Err(Failure::config(anyhow::anyhow!(
            "random/task-level baselines take --p, not --q"
        )));
    }
    if matches!(method, Method::Bm25 | Method::RBm25) && s.p.is_some_and(|p| p != 0) {
        return Err(Failure::config(anyhow::anyhow!("BM25 baselines take --q, not --p")));
    }
    spec.seed = seed;
    if let Some(t) = s.trials {
        spec.trials = t;
    }
    if let Some(r) = s.retriever_top {
        spec.retriever_top = r;
    }
    if let Some(r) = s.rbm25_pool {
        spec.rbm25_pool = r;
    }
    if let Some(n) = s.rbm25_max_ngram {
        spec.rbm25_max_ngram = n;
    }
    if let Some(w) = s.rbm25_weighting {
        spec.rbm25_weighting = w;
    }
    spec.validate().map_err(Failure::config)?;
    Ok(spec)
}

fn run(args: RunArgs) -> CliResult {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::config)?;
            toml::from_str::<RunSettings>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::config)?
        }
        None => RunSettings::default(),
    };
    let s = file.merge(args.settings);
    let data = s
        .data
        .clone()
        .ok_or_else(|| Failure::config(anyhow::anyhow!("--data is required")))?;
    let out = s
        .out
        .clone()
        .ok_or_else(|| Failure::config(anyhow::anyhow!("--out is required")))?;
    let spec = build_spec(&s)?;
    let template = s.template.clone().unwrap_or_default();
    let corpus = load_corpus(&data)?;
    let references = reference_table(&corpus);

    let http = HttpOptions {
        timeout: Duration::from_secs(s.timeout_secs.unwrap_or(120)),
        max_prompt_tokens: s.max_prompt_tokens,
    };
    let translator_spec = backend_spec("translator", s.translator.clone(), s.translator_url.clone())?
        .ok_or_else(|| Failure::config(anyhow::anyhow!("--translator or --translator-url is required")))?;
    let translator =
        translator_from_spec(&translator_spec, references.clone(), &template, &http).map_err(Failure::config)?;
    let retry = RetryPolicy {
        max_retries: s.max_retries.unwrap_or(RetryPolicy::default().max_retries),
        ..Default::default()
    };
    let translator: Arc<dyn Translator> = Arc::new(Retrying::new(translator, retry));

    let estimator_spec = backend_spec("estimator", s.estimator.clone(), s.qe_url.clone())?;
    let estimator_spec = match &spec.search {
        None => None,
        Some(c) if c.mode == SearchMode::Oracle => {
            if estimator_spec.as_deref().is_some_and(|e| e != "mock:oracle") {
                log::warn!("mode 3 scores with reference BLEU; ignoring the configured estimator");
            }
            Some("mock:oracle".to_string())
        }
        Some(_) => estimator_spec,
    };
    let estimator: Option<Arc<dyn Estimator>> = match (&spec.search, estimator_spec) {
        (None, _) => None,
        (Some(_), Some(e)) => {
            Some(estimator_from_spec(&e, references.clone(), spec.seed, &http).map_err(Failure::config)?)
        }
        (Some(_), None) => {
            return Err(Failure::config(anyhow::anyhow!(
                "search modes 1 and 2 need --estimator or --qe-url"
            )))
        }
    };
    let estimator = estimator.map(|e| Arc::new(Retrying::new(e, retry)) as Arc<dyn Estimator>);

    let mut experiment = Experiment::new(&corpus, template).with_parallelism(s.parallelism.unwrap_or(1));
    if let Some(bm25) = s.bm25 {
        experiment.bm25_params = bm25;
    }
    experiment.index_cache = s.index_cache.clone();
    let report = experiment.run(&spec, translator, estimator).map_err(|e| match e {
        RunError::Config(_) | RunError::Search(_) | RunError::Retriever(_) => Failure::config(e),
        other => Failure::from(anyhow::Error::from(other)),
    })?;
    write_report(&report, &out).context("writing report")?;

    let summary = &report.summary;
    let bleu = summary
        .corpus_bleu
        .as_ref()
        .map_or("n/a".to_string(), |b| format!("{:.2}", b.score));
    println!(
        "{}: BLEU {bleu}, {}/{} items ok, {} translator calls, TTP {}",
        out.display(),
        summary.succeeded,
        summary.test_size,
        summary.translator_calls,
        qe_icl::runner::report::format_hms(report.ttp)
    );
    if let Some(stats) = &summary.ice_count_stats {
        println!(
            "ICE count [min, mean, max] = [{}, {:.2}, {}]",
            stats.min, stats.mean, stats.max
        );
    }
    if report.backend_unreachable() {
        return Err(Failure {
            code: EXIT_UNREACHABLE,
            error: anyhow::anyhow!("every item failed with a transport error; is the backend running?"),
        });
    }
    if report.failure_rate() > MAX_FAILURE_RATE {
        return Err(Failure {
            code: EXIT_FAILURE_RATE,
            error: anyhow::anyhow!(
                "{} of {} items failed ({:.1}% > {:.0}%)",
                summary.failed,
                summary.test_size,
                100.0 * report.failure_rate(),
                100.0 * MAX_FAILURE_RATE
            ),
        });
    }
    Ok(())
}

fn synth_qe(args: SynthQeArgs) -> CliResult {
    let corpus = load_corpus(&args.data)?;
    let template = PromptTemplate::default();
    let spec = backend_spec("translator", args.translator, args.translator_url)?
        .ok_or_else(|| Failure::config(anyhow::anyhow!("--translator or --translator-url is required")))?;
    let translator = translator_from_spec(&spec, reference_table(&corpus), &template, &HttpOptions::default())
        .map_err(Failure::config)?;
    let translator = Retrying::new(translator, RetryPolicy::default());
    let mut out: Box<dyn Write> = if args.out.as_os_str() == "-" {
        Box::new(io::stdout().lock())
    } else {
        Box::new(BufWriter::new(
            fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
        ))
    };
    let summary = synthesize_qe_labels(
        &corpus.train,
        &translator,
        &template,
        args.sample_size,
        args.seed,
        &mut out,
    )
    .map_err(|e| match e {
        qe_icl::backends::synth::SynthError::SampleTooLarge { .. } => Failure::config(e),
        other => Failure::from(anyhow::Error::from(other)),
    })?;
    log::info!(
        "wrote {} of {} QE labels ({} failed)",
        summary.written,
        summary.requested,
        summary.failed
    );
    if summary.requested > 0 && summary.written == 0 {
        return Err(Failure {
            code: EXIT_UNREACHABLE,
            error: anyhow::anyhow!("no translation succeeded"),
        });
    }
    Ok(())
}

fn synth_corpus(args: SynthCorpusArgs) -> CliResult {
    let config = SyntheticConfig {
        train: args.train,
        dev: args.dev,
        test: args.test,
        vocab_size: args.vocab_size,
        seed: args.seed,
        ..Default::default()
    };
    let corpus = synthetic::generate(&config).map_err(Failure::config)?;
    corpus.write_dir(&args.out).context("writing corpus")?;
    log::info!(
        "wrote {}/{}/{} train/dev/test pairs to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}

fn load_references(args: &RefArgs) -> Result<Option<Vec<String>>, Failure> {
    if let Some(path) = &args.references {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::config)?;
        return Ok(Some(text.lines().map(str::to_string).collect()));
    }
    if let Some(dir) = &args.data {
        let test = load_split(dir, Split::Test).map_err(Failure::config)?;
        return Ok(Some(test.into_iter().map(|p| p.target).collect()));
    }
    Ok(None)
}

fn print_json(value: &impl serde::Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).context("serializing outcome")?;
    text.push('\n');
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).into()),
        _ => Ok(()),
    }
}

fn report(cmd: ReportCommand) -> CliResult {
    match cmd {
        ReportCommand::Verify { report, refs } => {
            let references = load_references(&refs)?
                .ok_or_else(|| Failure::config(anyhow::anyhow!("--references or --data is required")))?;
            let loaded = read_report(&report).map_err(Failure::config)?;
            let outcome = verify_report(&loaded, &references);
            print_json(&outcome)?;
            if !outcome.ok {
                return Err(anyhow::anyhow!("report {} failed verification", report.display()).into());
            }
        }
        ReportCommand::Compare { a, b, refs } => {
            let references = load_references(&refs)?;
            let ra = read_report(&a).map_err(Failure::config)?;
            let rb = read_report(&b).map_err(Failure::config)?;
            let outcome = compare_reports(&ra, &rb, references.as_deref()).map_err(Failure::config)?;
            print_json(&outcome)?;
        }
    }
    Ok(())
}
