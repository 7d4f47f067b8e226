//! Evaluation math: n-grams, corpus/sentence BLEU and the two-sample
//! Kolmogorov–Smirnov test.
//!
//! BLEU follows the conventions of the standard scorer (13a tokenization,
//! exponential smoothing, effective order at sentence level) so that scores
//! are comparable with published numbers.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_split_space, tokenize_13a};

pub const MAX_NGRAM_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("hypothesis/reference count mismatch: {hypotheses} vs {references}")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("BLEU needs at least one segment")]
    EmptyCorpus,
    #[error("KS test needs two non-empty samples")]
    EmptySample,
}

/// Counts every contiguous window of `n` tokens. Empty when `tokens.len() < n`.
pub fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut counts = HashMap::new();
    for window in tokens.windows(n) {
        *counts.entry(window).or_insert(0) += 1;
    }
    counts
}

/// Sufficient statistics for BLEU; additive over segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matched: [usize; MAX_NGRAM_ORDER],
    pub total: [usize; MAX_NGRAM_ORDER],
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: Self) {
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
        for n in 0..MAX_NGRAM_ORDER {
            self.matched[n] += rhs.matched[n];
            self.total[n] += rhs.total[n];
        }
    }
}

impl BleuStats {
    /// Statistics for a pre-tokenized hypothesis/reference pair.
    pub fn from_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let hyp: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
        let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        let mut stats = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_NGRAM_ORDER {
            let ref_counts = ngrams(&reference, n);
            for (gram, count) in ngrams(&hyp, n) {
                stats.total[n - 1] += count;
                if let Some(&rc) = ref_counts.get(gram) {
                    stats.matched[n - 1] += count.min(rc);
                }
            }
        }
        stats
    }

    pub fn from_text(hyp: &str, reference: &str) -> Self {
        Self::from_tokens(&bleu_tokens(hyp), &bleu_tokens(reference))
    }
}

fn bleu_tokens(text: &str) -> Vec<String> {
    tokenize_13a(text.trim_end_matches(is_split_space))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0..=100
    pub score: f64,
    /// Per-order precisions as fractions; smoothed values where smoothing applied.
    pub precisions: [f64; MAX_NGRAM_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matched: [usize; MAX_NGRAM_ORDER],
    pub total: [usize; MAX_NGRAM_ORDER],
}

/// Turns aggregated statistics into a score.
///
/// Orders with zero matches get exponential smoothing (each successive
/// zero-match order halves the pseudo-count). With `effective_order`, the
/// geometric mean only runs over orders that have at least one hypothesis
/// n-gram; without it, such an order makes the score zero. No matches at any
/// order always scores zero.
pub fn compute_bleu(stats: &BleuStats, effective_order: bool) -> BleuScore {
    let brevity_penalty = if stats.hyp_len < stats.ref_len {
        if stats.hyp_len > 0 {
            (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    let mut precisions = [0.0; MAX_NGRAM_ORDER];
    let mut out = BleuScore {
        score: 0.0,
        precisions,
        brevity_penalty,
        hyp_len: stats.hyp_len,
        ref_len: stats.ref_len,
        matched: stats.matched,
        total: stats.total,
    };
    if stats.matched.iter().all(|&m| m == 0) {
        return out;
    }

    let mut smooth = 1.0;
    let mut orders_used = MAX_NGRAM_ORDER;
    let mut degenerate = false;
    for (n, (precision, (&matched, &total))) in precisions
        .iter_mut()
        .zip(stats.matched.iter().zip(&stats.total))
        .enumerate()
    {
        if total == 0 {
            if effective_order {
                orders_used = n;
            } else {
                degenerate = true;
            }
            break;
        }
        *precision = if matched == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total as f64)
        } else {
            matched as f64 / total as f64
        };
    }
    out.precisions = precisions;
    if degenerate {
        return out;
    }
    let log_mean = precisions[..orders_used].iter().map(|p| p.ln()).sum::<f64>() / orders_used as f64;
    out.score = 100.0 * brevity_penalty * log_mean.exp();
    out
}

/// Corpus-level BLEU over line-aligned hypotheses and references.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuScore, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats += BleuStats::from_text(h.as_ref(), r.as_ref());
    }
    Ok(compute_bleu(&stats, false))
}

/// Sentence-level BLEU with smoothing and effective order, as a full score.
pub fn sentence_bleu_score(hypothesis: &str, reference: &str) -> BleuScore {
    compute_bleu(&BleuStats::from_text(hypothesis, reference), true)
}

/// Sentence-level BLEU in [0, 100].
pub fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    sentence_bleu_score(hypothesis, reference).score
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(sample_a: &[f64], sample_b: &[f64]) -> Result<KsResult, MetricsError> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);

    // Walk both sorted samples, consuming every copy of the smallest value
    // before comparing the ECDFs.
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }

    let n_eff = na * nb / (na + nb);
    let sqrt_n = n_eff.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// Kolmogorov survival function Q(λ) = 2 Σ (−1)^{j−1} exp(−2 j² λ²).
/// Returns 1 when the series does not converge (λ near zero).
pub fn kolmogorov_q(lambda: f64) -> f64 {
    let a2 = -2.0 * lambda * lambda;
    let mut sign = 2.0;
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = sign * (a2 * jf * jf).exp();
        sum += term;
        if term.abs() < 1e-12 {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
    }
    1.0
}
