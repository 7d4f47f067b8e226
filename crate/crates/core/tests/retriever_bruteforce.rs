//! BM25 ranking and R-BM25 re-ranking against exhaustive oracles.

mod common;

use std::collections::HashSet;

use common::brute_force_bm25;
use proptest::prelude::*;
use qe_icl::corpus::SentencePair;
use qe_icl::retriever::{
    load_or_build_index, reorder_unigram_overlap, rerank_rbm25, Bm25Index, Bm25Params, CoverageWeighting,
    RankedCandidate,
};

fn word() -> impl Strategy<Value = String> {
    (0u8..50).prop_map(|i| format!("w{i}"))
}

fn small_vocab_word() -> impl Strategy<Value = String> {
    (0u8..6).prop_map(|i| format!("w{i}"))
}

fn corpus(max_docs: usize) -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(word(), 1..12), 1..=max_docs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn top_k_equals_exhaustive_ranking(
        docs in corpus(200),
        query in prop::collection::vec(word(), 0..8),
        k in 1usize..40,
    ) {
        let params = Bm25Params::default();
        let index = Bm25Index::build(&docs, params).unwrap();
        let got: Vec<(usize, f64)> = index.top_k(&query, k).into_iter().map(|c| (c.pair_id, c.bm25_score)).collect();
        let want: Vec<(usize, f64)> = brute_force_bm25(&docs, &query, params).into_iter().take(k).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn duplicated_documents_tie_by_ascending_id(
        docs in prop::collection::vec(prop::collection::vec(small_vocab_word(), 1..5), 1..20),
        query in prop::collection::vec(small_vocab_word(), 1..4),
    ) {
        let doubled: Vec<Vec<String>> = docs.iter().chain(&docs).cloned().collect();
        let index = Bm25Index::build(&doubled, Bm25Params::default()).unwrap();
        let all = index.top_k(&query, doubled.len());
        let want = brute_force_bm25(&doubled, &query, Bm25Params::default());
        prop_assert_eq!(all.iter().map(|c| c.pair_id).collect::<Vec<_>>(), want.iter().map(|w| w.0).collect::<Vec<_>>());
        for pair in all.windows(2) {
            if pair[0].bm25_score == pair[1].bm25_score {
                prop_assert!(pair[0].pair_id < pair[1].pair_id);
            }
        }
    }

    #[test]
    fn scores_are_non_negative_and_ranks_dense(docs in corpus(60), query in prop::collection::vec(word(), 0..6)) {
        let index = Bm25Index::build(&docs, Bm25Params::default()).unwrap();
        let top = index.top_k(&query, docs.len());
        prop_assert_eq!(top.len(), docs.len());
        for (rank, c) in top.iter().enumerate() {
            prop_assert_eq!(c.rank, rank);
            prop_assert!(c.bm25_score >= 0.0);
            prop_assert_eq!(c.bm25_score, index.score(&query, c.pair_id));
        }
    }
}

fn ngram_set(tokens: &[String], n_max: usize) -> HashSet<Vec<String>> {
    (1..=n_max)
        .flat_map(|n| tokens.windows(n).map(|w| w.to_vec()))
        .collect()
}

/// Greedy set-coverage selection written out directly.
fn rbm25_oracle(
    pool: &[RankedCandidate],
    sources: &[Vec<String>],
    query: &[String],
    n_max: usize,
    q: usize,
) -> Vec<usize> {
    let full = ngram_set(query, n_max);
    let mut uncovered = full.clone();
    let mut remaining: Vec<&RankedCandidate> = pool.iter().collect();
    remaining.sort_by_key(|c| c.rank);
    let mut picked = Vec::new();
    while picked.len() < q && !remaining.is_empty() {
        let gains: Vec<usize> = remaining
            .iter()
            .map(|c| ngram_set(&sources[c.pair_id], n_max).intersection(&uncovered).count())
            .collect();
        let best = gains.iter().copied().max().unwrap();
        let pos = gains.iter().position(|&g| g == best).unwrap();
        let chosen = remaining.remove(pos);
        for g in ngram_set(&sources[chosen.pair_id], n_max) {
            uncovered.remove(&g);
        }
        if uncovered.is_empty() {
            uncovered = full.clone();
        }
        picked.push(chosen.pair_id);
    }
    picked
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rbm25_set_coverage_matches_oracle(
        docs in prop::collection::vec(prop::collection::vec(small_vocab_word(), 1..8), 1..40),
        query in prop::collection::vec(small_vocab_word(), 1..8),
        pool_size in 1usize..40,
        q in 1usize..17,
        n_max in 1usize..=4,
    ) {
        let index = Bm25Index::build(&docs, Bm25Params::default()).unwrap();
        let pool = index.top_k(&query, pool_size);
        let got = rerank_rbm25(&pool, &docs, &query, n_max, q, CoverageWeighting::Set).unwrap();
        let want = rbm25_oracle(&pool, &docs, &query, n_max, q);
        prop_assert_eq!(got.iter().map(|c| c.pair_id).collect::<Vec<_>>(), want);
        prop_assert_eq!(got.len(), q.min(pool.len()));
    }

    #[test]
    fn unigram_reorder_is_a_stable_permutation(
        docs in prop::collection::vec(prop::collection::vec(small_vocab_word(), 1..8), 1..30),
        query in prop::collection::vec(small_vocab_word(), 1..6),
    ) {
        let index = Bm25Index::build(&docs, Bm25Params::default()).unwrap();
        let pool = index.top_k(&query, 16);
        let reordered = reorder_unigram_overlap(&pool, &query, &docs);
        let q: HashSet<&String> = query.iter().collect();
        let overlap = |id: usize| docs[id].iter().collect::<HashSet<_>>().intersection(&q).count();
        let mut want: Vec<&RankedCandidate> = pool.iter().collect();
        want.sort_by_key(|c| std::cmp::Reverse(overlap(c.pair_id)));
        prop_assert_eq!(
            reordered.iter().map(|c| c.pair_id).collect::<Vec<_>>(),
            want.iter().map(|c| c.pair_id).collect::<Vec<_>>()
        );
    }
}

#[test]
fn hand_computed_three_document_scores() {
    // docs: "a b" "a" "c"; query "a b". N = 3, avgdl = 4/3.
    let docs: Vec<Vec<String>> = ["a b", "a", "c"]
        .iter()
        .map(|d| d.split(' ').map(str::to_string).collect())
        .collect();
    let index = Bm25Index::build(&docs, Bm25Params::default()).unwrap();
    let raw_a = ((3.0f64 - 2.0 + 0.5) / (2.0 + 0.5)).ln();
    let raw_b = ((3.0f64 - 1.0 + 0.5) / (1.0 + 0.5)).ln();
    let idf_a = 0.25 * ((raw_a + 2.0 * raw_b) / 3.0).abs();
    let weight = |idf: f64, dl: f64| idf * 2.5 / (1.0 + 1.5 * (0.25 + 0.75 * dl / (4.0 / 3.0)));
    let q = ["a".to_string(), "b".to_string()];
    assert!((index.score(&q, 0) - (weight(idf_a, 2.0) + weight(raw_b, 2.0))).abs() < 1e-12);
    assert!((index.score(&q, 1) - weight(idf_a, 1.0)).abs() < 1e-12);
    assert_eq!(index.score(&q, 2), 0.0);
    let ids: Vec<usize> = index.top_k(&q, 3).iter().map(|c| c.pair_id).collect();
    assert_eq!(ids, [0, 1, 2]);
}

#[test]
fn cached_index_round_trips_and_is_invalidated_by_corpus_changes() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("bm25.idx");
    let train: Vec<SentencePair> = (0..30)
        .map(|i| SentencePair {
            id: i,
            source: format!("w{} w{} w{}", i % 7, i % 5, i % 3),
            target: String::new(),
        })
        .collect();
    let tokens: Vec<Vec<String>> = train
        .iter()
        .map(|p| qe_icl::corpus::tokenize_words(&p.source))
        .collect();
    let built = load_or_build_index(Some(&cache), &train, &tokens, Bm25Params::default()).unwrap();
    assert!(cache.exists());
    let loaded = load_or_build_index(Some(&cache), &train, &tokens, Bm25Params::default()).unwrap();
    let q = ["w1".to_string(), "w2".to_string()];
    assert_eq!(built.top_k(&q, 10), loaded.top_k(&q, 10));

    let mut changed = train.clone();
    changed[0].source = "w6 w6 w6".into();
    let changed_tokens: Vec<Vec<String>> = changed
        .iter()
        .map(|p| qe_icl::corpus::tokenize_words(&p.source))
        .collect();
    let rebuilt = load_or_build_index(Some(&cache), &changed, &changed_tokens, Bm25Params::default()).unwrap();
    assert_eq!(rebuilt.term_frequency("w6", 0), 3);
}
