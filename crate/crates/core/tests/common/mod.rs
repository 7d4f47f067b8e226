//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use qe_icl::backends::{BackendError, ReferenceTable, Translation, Translator};
use qe_icl::corpus::{Corpus, SentencePair};
use qe_icl::retriever::{Bm25Params, RankedCandidate};
use qe_icl::synthetic::{self, SyntheticConfig};
use serde::Deserialize;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

// ---------------------------------------------------------------- BLEU

#[derive(Deserialize)]
pub struct BleuFixtures {
    pub scorer: String,
    pub tokenize: Vec<TokenizeCase>,
    pub sentence: Vec<SentenceCase>,
    pub corpus: Vec<CorpusCase>,
}

#[derive(Deserialize)]
pub struct TokenizeCase {
    pub text: String,
    pub tokens: Vec<String>,
}

#[derive(Deserialize)]
pub struct Expected {
    pub score: f64,
    pub counts: [usize; 4],
    pub totals: [usize; 4],
    pub precisions: [f64; 4],
    pub bp: f64,
    pub sys_len: usize,
    pub ref_len: usize,
}

#[derive(Deserialize)]
pub struct SentenceCase {
    pub hypothesis: String,
    pub reference: String,
    #[serde(flatten)]
    pub expected: Expected,
}

#[derive(Deserialize)]
pub struct CorpusCase {
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
    #[serde(flatten)]
    pub expected: Expected,
}

pub fn bleu_fixtures() -> BleuFixtures {
    let text = std::fs::read_to_string(fixture_path("bleu_reference.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

// ---------------------------------------------------------------- prompts

#[derive(Deserialize)]
pub struct PromptCase {
    pub template: qe_icl::prompt::PromptTemplate,
    pub examples: Vec<PromptExample>,
    pub query: String,
}

#[derive(Deserialize)]
pub struct PromptExample {
    pub source: String,
    pub target: String,
}

pub const PROMPT_CASES: [&str; 5] = [
    "zero_ice",
    "one_ice",
    "three_ice_tricky",
    "sixteen_ice",
    "custom_template",
];

/// The case inputs and the golden prompt bytes.
pub fn prompt_case(name: &str) -> (PromptCase, Vec<u8>) {
    let dir = fixture_path("prompts");
    let case = serde_json::from_slice(&std::fs::read(dir.join(format!("case_{name}.json"))).unwrap()).unwrap();
    let golden = std::fs::read(dir.join(format!("case_{name}.txt"))).unwrap();
    (case, golden)
}

impl PromptCase {
    pub fn pairs(&self) -> Vec<SentencePair> {
        self.examples
            .iter()
            .enumerate()
            .map(|(id, e)| SentencePair {
                id,
                source: e.source.clone(),
                target: e.target.clone(),
            })
            .collect()
    }
}

// ---------------------------------------------------------------- BM25 oracle

/// Exhaustive BM25: every document scored straight from the formula, then
/// sorted by descending score with ascending id on ties.
pub fn brute_force_bm25(docs: &[Vec<String>], query: &[String], params: Bm25Params) -> Vec<(usize, f64)> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let mut terms: Vec<&String> = Vec::new();
    let mut seen = HashSet::new();
    for tok in docs.iter().flatten() {
        if seen.insert(tok) {
            terms.push(tok);
        }
    }
    let raw_idf = |term: &String| {
        let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
        ((n - df + 0.5) / (df + 0.5)).ln()
    };
    let mean = terms.iter().map(|t| raw_idf(t)).sum::<f64>() / terms.len() as f64;
    let idf = |term: &String| {
        let v = raw_idf(term);
        if v <= 0.0 {
            params.epsilon * mean.abs()
        } else {
            v
        }
    };
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(id, doc)| {
            let dl = doc.len() as f64;
            let mut s = 0.0;
            for q in query {
                let tf = doc.iter().filter(|t| *t == q).count() as f64;
                if tf > 0.0 {
                    let (k1, b) = (params.k1, params.b);
                    s += idf(q) * (tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl)));
                }
            }
            (id, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

// ---------------------------------------------------------------- KS oracle

/// D statistic by evaluating both empirical CDFs at every sample point.
pub fn brute_force_ks(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], x: f64| s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- search fixtures

pub fn numbered_train(n: usize) -> Vec<SentencePair> {
    (0..n)
        .map(|i| SentencePair {
            id: i,
            source: format!("quelle {i}"),
            target: format!("target {i}"),
        })
        .collect()
}

pub fn candidates(n: usize) -> Vec<RankedCandidate> {
    (0..n)
        .map(|i| RankedCandidate {
            pair_id: i,
            bm25_score: (n - i) as f64,
            rank: i,
        })
        .collect()
}

/// Answers with the number of examples in the prompt. Prompts with at
/// least `oversized_from` examples are reported as too long, either through
/// the local token count or, with `reject_on_call`, by the backend itself.
pub struct ExampleCounter {
    pub oversized_from: Option<usize>,
    pub reject_on_call: bool,
    pub separator: String,
}

impl ExampleCounter {
    pub fn new() -> Self {
        ExampleCounter {
            oversized_from: None,
            reject_on_call: false,
            separator: qe_icl::prompt::PromptTemplate::default().separator,
        }
    }

    pub fn examples(&self, prompt: &str) -> usize {
        prompt.matches(self.separator.as_str()).count()
    }

    fn oversized(&self, prompt: &str) -> bool {
        self.oversized_from.is_some_and(|j| self.examples(prompt) >= j)
    }
}

impl Translator for ExampleCounter {
    fn name(&self) -> &str {
        "example-counter"
    }
    fn max_prompt_tokens(&self) -> Option<usize> {
        Some(1000)
    }
    fn count_tokens(&self, prompt: &str) -> Option<usize> {
        if !self.reject_on_call && self.oversized(prompt) {
            Some(1_000_000)
        } else {
            Some(10)
        }
    }
    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        if self.oversized(prompt) {
            return Err(BackendError::PromptTooLong("backend rejected the prompt".into()));
        }
        Ok(Translation::new(format!("{} examples", self.examples(prompt))))
    }
}

// ---------------------------------------------------------------- synthetic corpus

/// 500 train / 50 dev / 50 test pairs from the token dictionary.
pub fn synthetic_corpus() -> Corpus {
    synthetic::generate(&SyntheticConfig::default()).unwrap()
}

pub fn references(corpus: &Corpus) -> Arc<ReferenceTable> {
    Arc::new(ReferenceTable::from_pairs(
        corpus.test.iter().chain(&corpus.dev).chain(&corpus.train),
    ))
}
