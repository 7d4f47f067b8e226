//! Okapi BM25 retrieval over tokenized training sources, plus the two
//! candidate re-orderings used downstream (unigram overlap and R-BM25
//! n-gram coverage).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::SentencePair;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("cannot build a BM25 index over an empty corpus")]
    EmptyCorpus,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("output size q must be at least 1")]
    ZeroOutputSize,
    #[error("n-gram order must be in 1..=4, got {0}")]
    BadNgramOrder(usize),
    #[error("index cache I/O: {0}")]
    Io(#[from] io::Error),
    #[error("index cache is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Fraction of the mean idf assigned to terms whose idf is not positive.
    pub epsilon: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.5,
            b: 0.75,
            epsilon: 0.25,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), RetrieverError> {
        if self.k1.is_nan() || self.k1 <= 0.0 {
            return Err(RetrieverError::InvalidParams(format!(
                "k1 must be > 0, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrieverError::InvalidParams(format!(
                "b must be in [0, 1], got {}",
                self.b
            )));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(RetrieverError::InvalidParams(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    /// Train-split id of the example.
    pub pair_id: usize,
    pub bm25_score: f64,
    /// 0-based position in the current ordering.
    pub rank: usize,
}

/// Inverted BM25 index. Term ids follow first occurrence in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    vocab: HashMap<String, u32>,
    /// Per term, `(doc, term frequency)` sorted by doc.
    postings: Vec<Vec<(u32, u32)>>,
    idf: Vec<f64>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>], params: Bm25Params) -> Result<Self, RetrieverError> {
        params.validate()?;
        if docs.is_empty() {
            return Err(RetrieverError::EmptyCorpus);
        }
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut postings: Vec<Vec<(u32, u32)>> = Vec::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut total_len: u64 = 0;
        for (doc_id, doc) in docs.iter().enumerate() {
            doc_lengths.push(doc.len() as u32);
            total_len += doc.len() as u64;
            for tok in doc {
                let tok = tok.as_ref();
                let id = match vocab.get(tok) {
                    Some(&id) => id,
                    None => {
                        let id = postings.len() as u32;
                        vocab.insert(tok.to_string(), id);
                        postings.push(Vec::new());
                        id
                    }
                };
                let list = &mut postings[id as usize];
                match list.last_mut() {
                    Some((d, tf)) if *d == doc_id as u32 => *tf += 1,
                    _ => list.push((doc_id as u32, 1)),
                }
            }
        }

        let n = docs.len() as f64;
        let mut idf: Vec<f64> = postings
            .iter()
            .map(|p| {
                let df = p.len() as f64;
                ((n - df + 0.5) / (df + 0.5)).ln()
            })
            .collect();
        if !idf.is_empty() {
            let mean = idf.iter().sum::<f64>() / idf.len() as f64;
            let floor = params.epsilon * mean.abs();
            for v in idf.iter_mut().filter(|v| **v <= 0.0) {
                *v = floor;
            }
        }

        Ok(Bm25Index {
            params,
            vocab,
            postings,
            idf,
            doc_lengths,
            avg_doc_length: total_len as f64 / n,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc: usize) -> usize {
        self.doc_lengths[doc] as usize
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocab.get(term).map(|&t| self.idf[t as usize])
    }

    /// Number of documents containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.vocab.get(term).map_or(0, |&t| self.postings[t as usize].len())
    }

    pub fn term_frequency(&self, term: &str, doc: usize) -> usize {
        let Some(&t) = self.vocab.get(term) else { return 0 };
        let list = &self.postings[t as usize];
        list.binary_search_by_key(&(doc as u32), |&(d, _)| d)
            .map_or(0, |i| list[i].1 as usize)
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b, .. } = self.params;
        let tf = tf as f64;
        let dl = self.doc_lengths[doc] as f64;
        idf * (tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avg_doc_length)))
    }

    /// BM25 score of one document. Repeated query tokens count repeatedly.
    pub fn score<S: AsRef<str>>(&self, query: &[S], doc: usize) -> f64 {
        let mut total = 0.0;
        for tok in query {
            let Some(&t) = self.vocab.get(tok.as_ref()) else {
                continue;
            };
            let tf = self.term_frequency(tok.as_ref(), doc) as u32;
            if tf > 0 {
                total += self.term_weight(self.idf[t as usize], tf, doc);
            }
        }
        total
    }

    /// Scores of every document, in document order.
    pub fn score_all<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        for tok in query {
            let Some(&t) = self.vocab.get(tok.as_ref()) else {
                continue;
            };
            let idf = self.idf[t as usize];
            for &(doc, tf) in &self.postings[t as usize] {
                scores[doc as usize] += self.term_weight(idf, tf, doc as usize);
            }
        }
        scores
    }

    /// The `k` best documents by descending score, ties by ascending id.
    pub fn top_k<S: AsRef<str>>(&self, query: &[S], k: usize) -> Vec<RankedCandidate> {
        let scores = self.score_all(query);
        let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        let mut ids: Vec<usize> = (0..scores.len()).collect();
        let k = k.min(ids.len());
        if k == 0 {
            return Vec::new();
        }
        if k < ids.len() {
            ids.select_nth_unstable_by(k - 1, cmp);
            ids.truncate(k);
        }
        ids.sort_unstable_by(cmp);
        ids.into_iter()
            .enumerate()
            .map(|(rank, pair_id)| RankedCandidate {
                pair_id,
                bm25_score: scores[pair_id],
                rank,
            })
            .collect()
    }
}

const CACHE_MAGIC: &[u8; 8] = b"QEICLBM1";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheBody {
    corpus_hash: String,
    index: Bm25Index,
}

/// Content hash of the training sources, used to key the index cache.
pub fn corpus_fingerprint(train: &[SentencePair]) -> String {
    let mut h = Sha256::new();
    for pair in train {
        h.update(pair.source.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Writes the index with a versioned header.
pub fn save_index_cache(path: &Path, index: &Bm25Index, corpus_hash: &str) -> Result<(), RetrieverError> {
    let body = CacheBody {
        corpus_hash: corpus_hash.to_string(),
        index: index.clone(),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend(bincode::serialize(&body).map_err(|e| RetrieverError::Corrupt(e.to_string()))?);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a cached index. Returns `Ok(None)` when the cache is missing or was
/// built from a different corpus, parameters or format version.
pub fn load_index_cache(
    path: &Path,
    corpus_hash: &str,
    params: Bm25Params,
) -> Result<Option<Bm25Index>, RetrieverError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
        return Err(RetrieverError::Corrupt("bad magic".into()));
    }
    if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != CACHE_VERSION {
        return Ok(None);
    }
    let body: CacheBody = bincode::deserialize(&bytes[12..]).map_err(|e| RetrieverError::Corrupt(e.to_string()))?;
    if body.corpus_hash != corpus_hash || body.index.params != params {
        return Ok(None);
    }
    Ok(Some(body.index))
}

/// Loads the cached index if it is still valid, otherwise builds and caches it.
pub fn load_or_build_index(
    cache: Option<&Path>,
    train: &[SentencePair],
    train_tokens: &[Vec<String>],
    params: Bm25Params,
) -> Result<Bm25Index, RetrieverError> {
    let hash = corpus_fingerprint(train);
    if let Some(path) = cache {
        match load_index_cache(path, &hash, params) {
            Ok(Some(index)) => return Ok(index),
            Ok(None) => {}
            Err(e) => log::warn!("ignoring unreadable index cache {}: {e}", path.display()),
        }
    }
    let index = Bm25Index::build(train_tokens, params)?;
    if let Some(path) = cache {
        save_index_cache(path, &index, &hash)?;
    }
    Ok(index)
}

fn rerank(candidates: &[RankedCandidate], order: impl IntoIterator<Item = usize>) -> Vec<RankedCandidate> {
    order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| RankedCandidate { rank, ..candidates[i] })
        .collect()
}

/// Stable re-sort by the number of distinct query tokens each candidate
/// source shares with the query, highest first.
pub fn reorder_unigram_overlap<S: AsRef<str>>(
    candidates: &[RankedCandidate],
    query_tokens: &[S],
    sources: &[Vec<String>],
) -> Vec<RankedCandidate> {
    let query: HashSet<&str> = query_tokens.iter().map(AsRef::as_ref).collect();
    let overlaps: Vec<usize> = candidates
        .iter()
        .map(|c| {
            let cand: HashSet<&str> = sources[c.pair_id].iter().map(String::as_str).collect();
            cand.intersection(&query).count()
        })
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| overlaps[b].cmp(&overlaps[a]));
    rerank(candidates, order)
}

/// How R-BM25 measures a candidate's contribution to query coverage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageWeighting {
    /// Distinct query n-grams not yet covered.
    #[default]
    Set,
    /// Query n-gram occurrences not yet covered, clipped by candidate counts.
    Counts,
}

fn ngram_counts(tokens: &[String], n_max: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for n in 1..=n_max {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Greedy n-gram coverage re-ranking.
///
/// Repeatedly takes the candidate covering the most still-uncovered query
/// n-grams (orders `1..=n_max`), breaking ties by BM25 rank. Once every query
/// n-gram is covered the coverage resets, so up to `q` candidates are always
/// produced.
pub fn rerank_rbm25(
    candidates: &[RankedCandidate],
    sources: &[Vec<String>],
    query_tokens: &[String],
    n_max: usize,
    q: usize,
    weighting: CoverageWeighting,
) -> Result<Vec<RankedCandidate>, RetrieverError> {
    if q < 1 {
        return Err(RetrieverError::ZeroOutputSize);
    }
    if !(1..=4).contains(&n_max) {
        return Err(RetrieverError::BadNgramOrder(n_max));
    }
    let mut by_rank: Vec<usize> = (0..candidates.len()).collect();
    by_rank.sort_by_key(|&i| candidates[i].rank);

    let query = ngram_counts(query_tokens, n_max);
    let cand_grams: Vec<HashMap<&[String], usize>> = candidates
        .iter()
        .map(|c| ngram_counts(&sources[c.pair_id], n_max))
        .collect();

    let full: HashMap<&[String], usize> = match weighting {
        CoverageWeighting::Set => query.keys().map(|&g| (g, 1)).collect(),
        CoverageWeighting::Counts => query.clone(),
    };
    let mut uncovered = full.clone();
    let mut remaining = by_rank;
    let mut picked = Vec::with_capacity(q.min(candidates.len()));

    while picked.len() < q && !remaining.is_empty() {
        let gain = |i: usize| -> usize {
            cand_grams[i]
                .iter()
                .map(|(g, &c)| {
                    let left = uncovered.get(g).copied().unwrap_or(0);
                    match weighting {
                        CoverageWeighting::Set => left.min(1),
                        CoverageWeighting::Counts => left.min(c),
                    }
                })
                .sum()
        };
        let mut best_pos = 0;
        let mut best_gain = gain(remaining[0]);
        for (pos, &i) in remaining.iter().enumerate().skip(1) {
            let g = gain(i);
            if g > best_gain {
                best_gain = g;
                best_pos = pos;
            }
        }
        let chosen = remaining.remove(best_pos);
        for (g, &c) in &cand_grams[chosen] {
            if let Some(left) = uncovered.get_mut(g) {
                *left = left.saturating_sub(c);
            }
        }
        uncovered.retain(|_, left| *left > 0);
        if uncovered.is_empty() {
            uncovered = full.clone();
        }
        picked.push(chosen);
    }
    Ok(rerank(candidates, picked))
}
