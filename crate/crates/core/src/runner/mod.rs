//! Experiment orchestration: the four retrieval/sampling baselines and the
//! search modes, each producing a [`RunReport`] over the test split.

pub mod report;

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, Counted, Estimator, Translator};
use crate::corpus::{tokenize_words, Corpus, SentencePair};
use crate::metrics::{corpus_bleu, sentence_bleu};
use crate::prompt::PromptTemplate;
use crate::retriever::{load_or_build_index, rerank_rbm25, Bm25Index, Bm25Params, CoverageWeighting, RetrieverError};
use crate::search::{order_candidates, run_search, SearchConfig, SearchError};

pub use report::{
    compare_reports, read_report, verify_report, write_report, CompareOutcome, IceCountStats, ItemRecord, RunReport,
    RunSummary, TrialRecord, VerifyOutcome, SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("report I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("report format: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    TaskLevel,
    Bm25,
    #[serde(rename = "rbm25")]
    RBm25,
    Search,
}

impl Method {
    pub fn default_trials(self) -> usize {
        match self {
            Method::Random => 3,
            Method::TaskLevel => 100,
            _ => 1,
        }
    }
}

/// A fully specified experiment: which method, how many random (`p`) and
/// retrieved/searched (`q`) examples, and the knobs for each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub p: usize,
    pub q: usize,
    pub trials: usize,
    pub seed: u64,
    /// Retrieval pool handed to the search (K candidates).
    pub retriever_top: usize,
    /// BM25 hits re-ranked by R-BM25.
    pub rbm25_pool: usize,
    pub rbm25_max_ngram: usize,
    pub rbm25_weighting: CoverageWeighting,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
}

impl MethodSpec {
    fn base(method: Method) -> Self {
        MethodSpec {
            method,
            p: 0,
            q: 0,
            trials: method.default_trials(),
            seed: 0,
            retriever_top: 16,
            rbm25_pool: 100,
            rbm25_max_ngram: 4,
            rbm25_weighting: CoverageWeighting::Set,
            search: None,
        }
    }

    pub fn random(p: usize, seed: u64) -> Self {
        MethodSpec {
            p,
            seed,
            ..Self::base(Method::Random)
        }
    }

    pub fn task_level(p: usize, seed: u64) -> Self {
        MethodSpec {
            p,
            seed,
            ..Self::base(Method::TaskLevel)
        }
    }

    pub fn bm25(q: usize) -> Self {
        MethodSpec {
            q,
            ..Self::base(Method::Bm25)
        }
    }

    pub fn rbm25(q: usize) -> Self {
        MethodSpec {
            q,
            ..Self::base(Method::RBm25)
        }
    }

    pub fn search(config: SearchConfig) -> Self {
        MethodSpec {
            q: config.max_candidates,
            retriever_top: 16.max(config.max_candidates),
            search: Some(config),
            ..Self::base(Method::Search)
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let err = |m: &str| Err(RunError::Config(m.to_string()));
        match self.method {
            Method::Random | Method::TaskLevel => {
                if self.p < 1 || self.q != 0 {
                    return err("random/task-level baselines need p >= 1 and q = 0");
                }
                if self.trials < 1 {
                    return err("trials must be at least 1");
                }
            }
            Method::Bm25 | Method::RBm25 => {
                if self.q < 1 || self.p != 0 {
                    return err("BM25 baselines need q >= 1 and p = 0");
                }
                if self.method == Method::RBm25 && !(1..=4).contains(&self.rbm25_max_ngram) {
                    return err("R-BM25 n-gram order must be in 1..=4");
                }
            }
            Method::Search => {
                let Some(config) = &self.search else {
                    return err("search method needs a search config");
                };
                config.validate()?;
                if self.p != 0 {
                    return err("search selects retrieved examples only (p = 0)");
                }
                if self.retriever_top < 1 {
                    return err("retriever_top must be at least 1");
                }
            }
        }
        if self.p + self.q > 16 {
            return err("p + q must not exceed 16");
        }
        Ok(())
    }
}

/// Shared state for runs over one corpus: tokenized train sources and a
/// lazily built BM25 index.
pub struct Experiment<'a> {
    pub corpus: &'a Corpus,
    pub template: PromptTemplate,
    pub bm25_params: Bm25Params,
    pub index_cache: Option<std::path::PathBuf>,
    pub parallelism: usize,
    train_tokens: OnceLock<Vec<Vec<String>>>,
    index: OnceLock<Bm25Index>,
    pool: OnceLock<rayon::ThreadPool>,
}

impl<'a> Experiment<'a> {
    pub fn new(corpus: &'a Corpus, template: PromptTemplate) -> Self {
        Experiment {
            corpus,
            template,
            bm25_params: Bm25Params::default(),
            index_cache: None,
            parallelism: 1,
            train_tokens: OnceLock::new(),
            index: OnceLock::new(),
            pool: OnceLock::new(),
        }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self.pool = OnceLock::new();
        self
    }

    pub fn train_tokens(&self) -> &[Vec<String>] {
        self.train_tokens
            .get_or_init(|| self.corpus.train.iter().map(|p| tokenize_words(&p.source)).collect())
    }

    pub fn index(&self) -> Result<&Bm25Index, RunError> {
        if let Some(idx) = self.index.get() {
            return Ok(idx);
        }
        let idx = load_or_build_index(
            self.index_cache.as_deref(),
            &self.corpus.train,
            self.train_tokens(),
            self.bm25_params,
        )?;
        Ok(self.index.get_or_init(|| idx))
    }

    fn pool(&self) -> &rayon::ThreadPool {
        self.pool.get_or_init(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.parallelism)
                .build()
                .expect("thread pool")
        })
    }

    fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        self.pool().install(|| items.par_iter().map(f).collect())
    }

    fn ices(&self, ids: &[usize]) -> Vec<&SentencePair> {
        ids.iter().map(|&i| &self.corpus.train[i]).collect()
    }

    /// Runs any method. `estimator` is required for the search method.
    pub fn run(
        &self,
        spec: &MethodSpec,
        translator: Arc<dyn Translator>,
        estimator: Option<Arc<dyn Estimator>>,
    ) -> Result<RunReport, RunError> {
        spec.validate()?;
        if self.corpus.test.is_empty() {
            return Err(RunError::Config("test split is empty".into()));
        }
        if self.corpus.train.is_empty() {
            return Err(RunError::Config("train split is empty".into()));
        }
        let translator = Counted::new(translator);
        let estimator = estimator.map(Counted::new);
        let started = Instant::now();
        let (items, trials, winning_trial) = match spec.method {
            Method::Random | Method::TaskLevel => {
                let (items, trials, winner) = self.random_baseline(spec, &translator)?;
                (items, trials, Some(winner))
            }
            Method::Bm25 | Method::RBm25 => (self.retrieval_baseline(spec, &translator)?, Vec::new(), None),
            Method::Search => {
                let Some(est) = &estimator else {
                    return Err(RunError::Config("search method needs an estimator".into()));
                };
                (self.search_items(spec, &translator, est)?, Vec::new(), None)
            }
        };
        let ttp = started.elapsed();
        Ok(self.assemble(spec, &translator, estimator.as_ref(), items, trials, winning_trial, ttp))
    }

    fn translate_with_prefix(
        &self,
        translator: &dyn Translator,
        prefix: &str,
        pair: &SentencePair,
    ) -> Result<String, BackendError> {
        translator
            .translate(&self.template.render_query(prefix, &pair.source))
            .map(|t| t.text)
    }

    fn random_baseline(
        &self,
        spec: &MethodSpec,
        translator: &dyn Translator,
    ) -> Result<(Vec<ItemRecord>, Vec<TrialRecord>, usize), RunError> {
        let train = &self.corpus.train;
        let dev = &self.corpus.dev;
        if dev.is_empty() {
            return Err(RunError::Config("random/task-level baselines need a dev split".into()));
        }
        if spec.p > train.len() {
            return Err(RunError::Config(format!(
                "p = {} exceeds train size {}",
                spec.p,
                train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut trials = Vec::with_capacity(spec.trials);
        for trial in 0..spec.trials {
            let mut ids = rand::seq::index::sample(&mut rng, train.len(), spec.p).into_vec();
            ids.sort_unstable();
            let prefix = self.template.render_prefix(self.ices(&ids));
            let outputs = self.par_map(dev, |pair| self.translate_with_prefix(translator, &prefix, pair));
            let (hyps, refs): (Vec<&str>, Vec<&str>) = outputs
                .iter()
                .zip(dev)
                .filter_map(|(o, pair)| o.as_ref().ok().map(|h| (h.as_str(), pair.target.as_str())))
                .unzip();
            let failed = outputs.iter().filter(|o| o.is_err()).count();
            let dev_bleu = corpus_bleu(&hyps, &refs).ok().map(|b| b.score);
            trials.push(TrialRecord {
                trial,
                ice_ids: ids,
                dev_bleu,
                failed,
            });
        }
        let mut winner = 0;
        for t in &trials[1..] {
            if t.dev_bleu.unwrap_or(f64::NEG_INFINITY) > trials[winner].dev_bleu.unwrap_or(f64::NEG_INFINITY) {
                winner = t.trial;
            }
        }
        let ids = trials[winner].ice_ids.clone();
        let prefix = self.template.render_prefix(self.ices(&ids));
        let items = self.par_map(&self.corpus.test, |pair| {
            let t0 = Instant::now();
            let out = self.translate_with_prefix(translator, &prefix, pair);
            ItemRecord::from_translation(pair, ids.clone(), out, t0.elapsed())
        });
        Ok((items, trials, winner))
    }

    fn retrieval_baseline(&self, spec: &MethodSpec, translator: &dyn Translator) -> Result<Vec<ItemRecord>, RunError> {
        let index = self.index()?;
        let train_tokens = self.train_tokens();
        let items = self.par_map(&self.corpus.test, |pair| {
            let t0 = Instant::now();
            let query = tokenize_words(&pair.source);
            let selected = match spec.method {
                Method::RBm25 => {
                    let pool = index.top_k(&query, spec.rbm25_pool.max(spec.q));
                    rerank_rbm25(
                        &pool,
                        train_tokens,
                        &query,
                        spec.rbm25_max_ngram,
                        spec.q,
                        spec.rbm25_weighting,
                    )
                    .expect("validated R-BM25 arguments")
                }
                _ => index.top_k(&query, spec.q),
            };
            let ids: Vec<usize> = selected.iter().map(|c| c.pair_id).collect();
            let prefix = self.template.render_prefix(self.ices(&ids));
            let out = self.translate_with_prefix(translator, &prefix, pair);
            ItemRecord::from_translation(pair, ids, out, t0.elapsed())
        });
        Ok(items)
    }

    fn search_items(
        &self,
        spec: &MethodSpec,
        translator: &dyn Translator,
        estimator: &dyn Estimator,
    ) -> Result<Vec<ItemRecord>, RunError> {
        let config = spec.search.as_ref().expect("validated");
        let index = self.index()?;
        let train_tokens = self.train_tokens();
        let items = self.par_map(&self.corpus.test, |pair| {
            let t0 = Instant::now();
            let query = tokenize_words(&pair.source);
            let retrieved = index.top_k(&query, spec.retriever_top);
            let ordered = order_candidates(config.mode, &retrieved, &query, train_tokens);
            let result = run_search(
                &pair.source,
                &ordered,
                &self.corpus.train,
                &self.template,
                translator,
                estimator,
                config,
            );
            ItemRecord::from_search(pair, result, t0.elapsed())
        });
        Ok(items)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        spec: &MethodSpec,
        translator: &Counted<Arc<dyn Translator>>,
        estimator: Option<&Counted<Arc<dyn Estimator>>>,
        items: Vec<ItemRecord>,
        trials: Vec<TrialRecord>,
        winning_trial: Option<usize>,
        ttp: Duration,
    ) -> RunReport {
        let (hyps, refs): (Vec<&str>, Vec<&str>) = items
            .iter()
            .zip(&self.corpus.test)
            .filter_map(|(item, pair)| item.translation.as_deref().map(|h| (h, pair.target.as_str())))
            .unzip();
        let failed = items.iter().filter(|i| i.error.is_some()).count();
        let snapshot = ConfigSnapshot {
            method: spec,
            translator: translator.name(),
            estimator: estimator.map(|e| e.name()),
            template: &self.template,
            bm25: self.bm25_params,
            data: data_fingerprint(self.corpus),
        };
        let summary = RunSummary {
            schema_version: SCHEMA_VERSION,
            method: spec.clone(),
            mode: spec.search.as_ref().map(|c| c.mode.number()),
            translator: translator.name().to_string(),
            estimator: estimator.map(|e| e.name().to_string()),
            template: self.template.clone(),
            bm25: self.bm25_params,
            config_hash: snapshot.hash(),
            test_size: self.corpus.test.len(),
            succeeded: items.len() - failed,
            failed,
            corpus_bleu: corpus_bleu(&hyps, &refs).ok(),
            ice_count_stats: IceCountStats::from_counts(
                items.iter().filter(|i| i.error.is_none()).map(|i| i.ice_ids.len()),
            ),
            translator_calls: translator.calls(),
            estimator_calls: estimator.map_or(0, |e| e.calls()),
            trials,
            winning_trial,
            energy_accounting: "unavailable".to_string(),
        };
        RunReport { summary, items, ttp }
    }
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    method: &'a MethodSpec,
    translator: &'a str,
    estimator: Option<&'a str>,
    template: &'a PromptTemplate,
    bm25: Bm25Params,
    data: String,
}

impl ConfigSnapshot<'_> {
    fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("snapshot serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn data_fingerprint(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        h.update(name.as_bytes());
        for p in split {
            h.update(p.source.as_bytes());
            h.update(b"\t");
            h.update(p.target.as_bytes());
            h.update(b"\n");
        }
    }
    hex::encode(h.finalize())
}

impl ItemRecord {
    fn from_translation(
        pair: &SentencePair,
        ice_ids: Vec<usize>,
        out: Result<String, BackendError>,
        wall: Duration,
    ) -> Self {
        match out {
            Ok(text) => ItemRecord {
                query_id: pair.id,
                ice_ids,
                sentence_bleu: Some(sentence_bleu(&text, &pair.target)),
                translation: Some(text),
                estimated_quality: None,
                iterations: 1,
                stop_reason: None,
                error: None,
                transport_failure: false,
                wall_time: wall,
            },
            Err(e) => ItemRecord {
                transport_failure: e.is_transport(),
                ..ItemRecord::failed(pair, ice_ids, e.to_string(), wall)
            },
        }
    }

    fn from_search(
        pair: &SentencePair,
        result: Result<crate::search::SearchResult, SearchError>,
        wall: Duration,
    ) -> Self {
        match result {
            Ok(r) => ItemRecord {
                query_id: pair.id,
                sentence_bleu: Some(sentence_bleu(&r.best.translation, &pair.target)),
                ice_ids: r.best.ice_ids,
                translation: Some(r.best.translation),
                estimated_quality: Some(r.best.estimated_quality),
                iterations: r.iterations,
                stop_reason: Some(r.stop_reason),
                error: None,
                transport_failure: false,
                wall_time: wall,
            },
            Err(e) => {
                let (iterations, transport_failure) = match &e {
                    SearchError::Backend { trace, error } => (trace.len(), error.is_transport()),
                    _ => (0, false),
                };
                ItemRecord {
                    iterations,
                    transport_failure,
                    ..ItemRecord::failed(pair, Vec::new(), e.to_string(), wall)
                }
            }
        }
    }

    fn failed(pair: &SentencePair, ice_ids: Vec<usize>, error: String, wall: Duration) -> Self {
        ItemRecord {
            query_id: pair.id,
            ice_ids,
            translation: None,
            sentence_bleu: None,
            estimated_quality: None,
            iterations: 0,
            stop_reason: None,
            error: Some(error),
            transport_failure: false,
            wall_time: wall,
        }
    }
}
