//! Training-data synthesis for a quality-estimation model: translate sampled
//! sources without examples and label each output with sentence BLEU
//! against the reference.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Translator;
use crate::corpus::SentencePair;
use crate::metrics::sentence_bleu;
use crate::prompt::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeLabelRecord {
    pub source: String,
    #[serde(rename = "mt")]
    pub machine_translation: String,
    pub label: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub requested: usize,
    pub written: usize,
    pub failed: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("sample size {sample_size} exceeds corpus size {corpus_size}")]
    SampleTooLarge { sample_size: usize, corpus_size: usize },
    #[error("writing QE labels: {0}")]
    Io(#[from] io::Error),
}

/// Samples `sample_size` pairs without replacement and streams one JSONL
/// record per successful translation. Failed items are logged and skipped.
pub fn synthesize_qe_labels<W: Write>(
    pairs: &[SentencePair],
    translator: &dyn Translator,
    template: &PromptTemplate,
    sample_size: usize,
    seed: u64,
    out: &mut W,
) -> Result<SynthSummary, SynthError> {
    if sample_size > pairs.len() {
        return Err(SynthError::SampleTooLarge {
            sample_size,
            corpus_size: pairs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pairs.len(), sample_size);
    let mut summary = SynthSummary {
        requested: sample_size,
        ..Default::default()
    };
    for i in picks.iter() {
        let pair = &pairs[i];
        let prompt = template.render([], &pair.source);
        match translator.translate(&prompt) {
            Ok(t) => {
                let record = QeLabelRecord {
                    source: pair.source.clone(),
                    label: sentence_bleu(&t.text, &pair.target),
                    machine_translation: t.text,
                };
                serde_json::to_writer(&mut *out, &record).map_err(io::Error::from)?;
                out.write_all(b"\n")?;
                summary.written += 1;
            }
            Err(e) => {
                log::warn!("skipping train pair {}: {e}", pair.id);
                summary.failed += 1;
            }
        }
    }
    out.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FixedTranslator, ReferenceTable, ReferenceTranslator};
    use std::sync::Arc;

    fn corpus(n: usize) -> Vec<SentencePair> {
        (0..n)
            .map(|i| SentencePair {
                id: i,
                source: format!("quelle {i} satz"),
                target: format!("source {i} sentence here"),
            })
            .collect()
    }

    fn read(bytes: &[u8]) -> Vec<QeLabelRecord> {
        std::str::from_utf8(bytes)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn perfect_translator_labels_100() {
        let pairs = corpus(20);
        let t = ReferenceTranslator::new(Arc::new(ReferenceTable::from_pairs(&pairs)), PromptTemplate::default());
        let mut out = Vec::new();
        let s = synthesize_qe_labels(&pairs, &t, &PromptTemplate::default(), 10, 3, &mut out).unwrap();
        assert_eq!(s.written, 10);
        let recs = read(&out);
        assert_eq!(recs.len(), 10);
        assert!(recs.iter().all(|r| r.label == 100.0));
        let distinct: std::collections::HashSet<_> = recs.iter().map(|r| &r.source).collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn constant_translator_labels_zero() {
        let pairs = corpus(5);
        let mut out = Vec::new();
        synthesize_qe_labels(
            &pairs,
            &FixedTranslator::new("unk"),
            &PromptTemplate::default(),
            5,
            0,
            &mut out,
        )
        .unwrap();
        assert!(read(&out)
            .iter()
            .all(|r| r.label == 0.0 && r.machine_translation == "unk"));
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let pairs = corpus(50);
        let t = FixedTranslator::new("source sentence");
        let run = |seed| {
            let mut out = Vec::new();
            synthesize_qe_labels(&pairs, &t, &PromptTemplate::default(), 20, seed, &mut out).unwrap();
            out
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
        let line = String::from_utf8(run(11)).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert!(first.get("mt").is_some() && first.get("label").is_some());
    }

    #[test]
    fn oversized_sample_rejected() {
        let mut out = Vec::new();
        let err = synthesize_qe_labels(
            &corpus(2),
            &FixedTranslator::new("x"),
            &PromptTemplate::default(),
            3,
            0,
            &mut out,
        );
        assert!(matches!(err, Err(SynthError::SampleTooLarge { .. })));
    }
}
