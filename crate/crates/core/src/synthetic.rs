//! Synthetic parallel corpora built from a one-to-one token dictionary.
//!
//! Source word `i` always translates to target word `i`, and sentences are
//! translated word by word, so the overlap between a query and its examples
//! carries over exactly to the target side. Word frequencies follow a Zipf
//! law, which gives BM25 a realistic mix of common and rare terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, SentencePair};

const SOURCE_SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "pu", "ra", "si", "to", "vu", "ze", "bo", "di"];
const TARGET_SYLLABLES: [&str; 12] = ["ag", "el", "if", "om", "ur", "ys", "et", "ab", "ic", "od", "ex", "aw"];

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("vocabulary size must be between 1 and {max}, got {got}")]
    VocabularySize { got: usize, max: usize },
    #[error("sentence lengths must satisfy 1 <= min_len <= max_len, got {min_len}..={max_len}")]
    Lengths { min_len: usize, max_len: usize },
    #[error("Zipf exponent must be finite and non-negative, got {0}")]
    Exponent(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 500,
            dev: 50,
            test: 50,
            vocab_size: 400,
            min_len: 6,
            max_len: 14,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

/// Words are three syllables, so the dictionary holds at most 12³ entries.
pub const MAX_VOCAB: usize = 12 * 12 * 12;

fn spell(mut index: usize, syllables: &[&str; 12]) -> String {
    let mut word = String::with_capacity(6);
    for _ in 0..3 {
        word.push_str(syllables[index % 12]);
        index /= 12;
    }
    word
}

/// The `(source, target)` word pair at dictionary position `index`.
pub fn dictionary_entry(index: usize) -> (String, String) {
    (spell(index, &SOURCE_SYLLABLES), spell(index, &TARGET_SYLLABLES))
}

pub fn generate(config: &SyntheticConfig) -> Result<Corpus, SyntheticError> {
    if config.vocab_size == 0 || config.vocab_size > MAX_VOCAB {
        return Err(SyntheticError::VocabularySize {
            got: config.vocab_size,
            max: MAX_VOCAB,
        });
    }
    if config.min_len == 0 || config.min_len > config.max_len {
        return Err(SyntheticError::Lengths {
            min_len: config.min_len,
            max_len: config.max_len,
        });
    }
    let zipf = Zipf::new(config.vocab_size as f64, config.zipf_exponent)
        .map_err(|_| SyntheticError::Exponent(config.zipf_exponent))?;
    let dictionary: Vec<(String, String)> = (0..config.vocab_size).map(dictionary_entry).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut split = |n: usize| -> Vec<SentencePair> {
        (0..n)
            .map(|id| {
                let len = rng.random_range(config.min_len..=config.max_len);
                let words: Vec<usize> = (0..len).map(|_| zipf.sample(&mut rng) as usize - 1).collect();
                let join = |side: fn(&(String, String)) -> &str| {
                    words
                        .iter()
                        .map(|&w| side(&dictionary[w]))
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                SentencePair {
                    id,
                    source: join(|e| &e.0),
                    target: join(|e| &e.1),
                }
            })
            .collect()
    };
    let train = split(config.train);
    let dev = split(config.dev);
    let test = split(config.test);
    Ok(Corpus { train, dev, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn dictionary_is_injective_and_disjoint() {
        let mut seen = HashSet::new();
        for i in 0..MAX_VOCAB {
            let (s, t) = dictionary_entry(i);
            assert!(seen.insert(s));
            assert!(seen.insert(t));
        }
        assert!(!seen.contains("unk"));
    }

    #[test]
    fn word_by_word_translation() {
        let corpus = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!((corpus.train.len(), corpus.dev.len(), corpus.test.len()), (500, 50, 50));
        let lookup: std::collections::HashMap<String, String> = (0..400).map(dictionary_entry).collect();
        for pair in corpus.train.iter().chain(&corpus.test) {
            let src: Vec<&str> = pair.source.split(' ').collect();
            let tgt: Vec<&str> = pair.target.split(' ').collect();
            assert!((6..=14).contains(&src.len()));
            assert_eq!(src.iter().map(|w| lookup[*w].as_str()).collect::<Vec<_>>(), tgt);
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        let c = generate(&SyntheticConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(a.test, b.test);
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |c: SyntheticConfig| generate(&c).is_err();
        assert!(bad(SyntheticConfig {
            vocab_size: 0,
            ..Default::default()
        }));
        assert!(bad(SyntheticConfig {
            vocab_size: MAX_VOCAB + 1,
            ..Default::default()
        }));
        assert!(bad(SyntheticConfig {
            min_len: 5,
            max_len: 4,
            ..Default::default()
        }));
        assert!(bad(SyntheticConfig {
            zipf_exponent: -1.0,
            ..Default::default()
        }));
    }
}
