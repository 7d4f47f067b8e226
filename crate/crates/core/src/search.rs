//! Quality-estimation-guided greedy search over in-context examples.
//!
//! Each iteration appends the next retrieved candidate to the examples
//! already in the prompt, translates, and scores the output with the
//! estimator. The search stops when the estimate reaches the ceiling, when
//! `patience` consecutive iterations fail to beat the best estimate so far,
//! when the prompt grows too long, or when the candidates run out. The
//! result is the highest-scoring prompt; ties go to the one with fewer
//! examples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Estimator, Translator};
use crate::corpus::SentencePair;
use crate::prompt::{estimate_length, PromptTemplate};
use crate::retriever::{reorder_unigram_overlap, RankedCandidate};

/// Which candidate ordering and which score drive the search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Estimator scores over BM25-ordered candidates.
    #[default]
    QeBm25,
    /// Estimator scores over candidates re-ordered by unigram overlap.
    QeUnigram,
    /// Reference BLEU over BM25-ordered candidates (upper bound).
    Oracle,
}

impl SearchMode {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(SearchMode::QeBm25),
            2 => Some(SearchMode::QeUnigram),
            3 => Some(SearchMode::Oracle),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            SearchMode::QeBm25 => 1,
            SearchMode::QeUnigram => 2,
            SearchMode::Oracle => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Upper bound on iterations (K).
    pub max_candidates: usize,
    /// Consecutive non-improving iterations tolerated (P).
    pub patience: usize,
    pub termination_score: f64,
    pub max_prompt_tokens: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            mode: SearchMode::QeBm25,
            max_candidates: 16,
            patience: 8,
            termination_score: 100.0,
            max_prompt_tokens: 2048,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.patience < 1 {
            return Err(SearchError::InvalidConfig("patience must be at least 1".into()));
        }
        if self.max_candidates < 1 {
            return Err(SearchError::InvalidConfig("max_candidates must be at least 1".into()));
        }
        if self.termination_score.is_nan() || self.termination_score <= 0.0 {
            return Err(SearchError::InvalidConfig("termination_score must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTraceEntry {
    pub ice_count: usize,
    /// Train ids of the examples in the prompt, in prompt order.
    pub ice_ids: Vec<usize>,
    pub prompt_text: String,
    pub translation: String,
    pub estimated_quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    PatienceExhausted,
    AllCandidatesUsed,
    ScoreCeiling,
    PromptTooLong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: SearchTraceEntry,
    pub trace: Vec<SearchTraceEntry>,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("no candidates to search over")]
    NoCandidates,
    #[error("candidate {0} is not a train id")]
    UnknownCandidate(usize),
    #[error("the one-example prompt already exceeds the length limit ({tokens} > {limit} tokens)")]
    NoFeasiblePrompt { tokens: usize, limit: usize },
    #[error("backend failed after {} evaluated prompts: {error}", trace.len())]
    Backend {
        #[source]
        error: BackendError,
        trace: Vec<SearchTraceEntry>,
    },
}

/// Orders retrieved candidates for the given mode.
pub fn order_candidates<S: AsRef<str>>(
    mode: SearchMode,
    bm25_list: &[RankedCandidate],
    query_tokens: &[S],
    train_tokens: &[Vec<String>],
) -> Vec<RankedCandidate> {
    match mode {
        SearchMode::QeBm25 | SearchMode::Oracle => bm25_list.to_vec(),
        SearchMode::QeUnigram => reorder_unigram_overlap(bm25_list, query_tokens, train_tokens),
    }
}

/// Runs the search for one query. `candidates` must already be in mode order.
pub fn run_search(
    query_source: &str,
    candidates: &[RankedCandidate],
    train: &[SentencePair],
    template: &PromptTemplate,
    translator: &dyn Translator,
    estimator: &dyn Estimator,
    config: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(SearchError::NoCandidates);
    }
    let limit = translator
        .max_prompt_tokens()
        .map_or(config.max_prompt_tokens, |m| m.min(config.max_prompt_tokens));

    let mut trace: Vec<SearchTraceEntry> = Vec::new();
    let mut best: Option<usize> = None;
    // Starts at the 0.0 sentinel, so only positive estimates reset patience.
    let mut best_score = 0.0;
    let mut patience_used = 0;
    let mut prefix = String::new();
    let mut ice_ids = Vec::new();
    let mut early_stop = None;

    for cand in candidates.iter().take(config.max_candidates) {
        if patience_used >= config.patience {
            break;
        }
        let pair = train
            .get(cand.pair_id)
            .ok_or(SearchError::UnknownCandidate(cand.pair_id))?;
        template.push_example(&mut prefix, pair);
        ice_ids.push(pair.id);
        let prompt = template.render_query(&prefix, query_source);

        let tokens = translator
            .count_tokens(&prompt)
            .unwrap_or_else(|| estimate_length(&prompt));
        if tokens > limit {
            if trace.is_empty() {
                return Err(SearchError::NoFeasiblePrompt { tokens, limit });
            }
            early_stop = Some(StopReason::PromptTooLong);
            break;
        }
        let translation = match translator.translate(&prompt) {
            Ok(t) => t.text,
            Err(BackendError::PromptTooLong(_)) if !trace.is_empty() => {
                early_stop = Some(StopReason::PromptTooLong);
                break;
            }
            Err(BackendError::PromptTooLong(_)) => return Err(SearchError::NoFeasiblePrompt { tokens, limit }),
            Err(error) => return Err(SearchError::Backend { error, trace }),
        };
        let quality = match estimator.estimate(query_source, &translation) {
            Ok(q) if q.is_nan() => {
                let error = BackendError::Protocol("estimator returned NaN".into());
                return Err(SearchError::Backend { error, trace });
            }
            Ok(q) => q,
            Err(error) => return Err(SearchError::Backend { error, trace }),
        };

        trace.push(SearchTraceEntry {
            ice_count: ice_ids.len(),
            ice_ids: ice_ids.clone(),
            prompt_text: prompt,
            translation,
            estimated_quality: quality,
        });
        if best.is_none_or(|b| quality > trace[b].estimated_quality) {
            best = Some(trace.len() - 1);
        }
        if quality >= config.termination_score {
            early_stop = Some(StopReason::ScoreCeiling);
            break;
        }
        if quality <= best_score {
            patience_used += 1;
        } else {
            patience_used = 0;
        }
        best_score = f64::max(best_score, quality);
    }

    let stop_reason = early_stop.unwrap_or(if patience_used >= config.patience {
        StopReason::PatienceExhausted
    } else {
        StopReason::AllCandidatesUsed
    });
    let best = trace[best.expect("at least one prompt evaluated")].clone();
    Ok(SearchResult {
        best,
        iterations: trace.len(),
        trace,
        stop_reason,
    })
}
