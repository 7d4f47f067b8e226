//! Deterministic backends for tests and synthetic experiments.

use std::collections::{HashSet, VecDeque};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{BackendError, Estimator, ReferenceTable, Translation, Translator};
use crate::corpus::tokenize_13a;
use crate::metrics::sentence_bleu;
use crate::prompt::PromptTemplate;

/// Returns the query source unchanged.
#[derive(Debug, Clone, Default)]
pub struct EchoTranslator {
    template: PromptTemplate,
}

impl EchoTranslator {
    pub fn new(template: PromptTemplate) -> Self {
        EchoTranslator { template }
    }
}

impl Translator for EchoTranslator {
    fn name(&self) -> &str {
        "mock:echo"
    }
    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        Ok(Translation::new(self.template.parse(prompt).query_source))
    }
}

/// Returns the same text for every prompt.
#[derive(Debug, Clone)]
pub struct FixedTranslator {
    text: String,
}

impl FixedTranslator {
    pub fn new(text: impl Into<String>) -> Self {
        FixedTranslator { text: text.into() }
    }
}

impl Translator for FixedTranslator {
    fn name(&self) -> &str {
        "mock:fixed"
    }
    fn translate(&self, _prompt: &str) -> Result<Translation, BackendError> {
        Ok(Translation::new(self.text.clone()))
    }
}

/// Returns the hidden reference of the query, ignoring the examples.
#[derive(Debug, Clone)]
pub struct ReferenceTranslator {
    references: Arc<ReferenceTable>,
    template: PromptTemplate,
}

impl ReferenceTranslator {
    pub fn new(references: Arc<ReferenceTable>, template: PromptTemplate) -> Self {
        ReferenceTranslator { references, template }
    }
}

impl Translator for ReferenceTranslator {
    fn name(&self) -> &str {
        "mock:reference"
    }
    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        let query = self.template.parse(prompt).query_source;
        Ok(Translation::new(self.references.get(&query)?))
    }
}

/// Reveals each reference token of the query only if it appears in some
/// example target of the prompt; every other token becomes `unk`.
///
/// Output quality is a monotone function of how well the examples cover the
/// reference vocabulary.
#[derive(Debug, Clone)]
pub struct CoverageTranslator {
    references: Arc<ReferenceTable>,
    template: PromptTemplate,
}

pub const MASK_TOKEN: &str = "unk";

impl CoverageTranslator {
    pub fn new(references: Arc<ReferenceTable>, template: PromptTemplate) -> Self {
        CoverageTranslator { references, template }
    }
}

impl Translator for CoverageTranslator {
    fn name(&self) -> &str {
        "mock:coverage"
    }
    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        let parsed = self.template.parse(prompt);
        let reference = self.references.get(&parsed.query_source)?;
        let known: HashSet<String> = parsed.example_targets.iter().flat_map(|t| tokenize_13a(t)).collect();
        let out: Vec<String> = tokenize_13a(reference)
            .into_iter()
            .map(|t| if known.contains(&t) { t } else { MASK_TOKEN.to_string() })
            .collect();
        Ok(Translation::new(out.join(" ")))
    }
}

/// Scores a hypothesis by sentence BLEU against the hidden reference.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    references: Arc<ReferenceTable>,
}

impl OracleEstimator {
    pub fn new(references: Arc<ReferenceTable>) -> Self {
        OracleEstimator { references }
    }
}

impl Estimator for OracleEstimator {
    fn name(&self) -> &str {
        "mock:oracle"
    }
    fn estimate(&self, source: &str, hypothesis: &str) -> Result<f64, BackendError> {
        Ok(sentence_bleu(hypothesis, self.references.get(source)?))
    }
}

/// Oracle score plus zero-mean Gaussian noise, clamped to [0, 100].
///
/// The noise is a pure function of `(seed, source, hypothesis)`, so results
/// do not depend on call order or concurrency.
#[derive(Debug, Clone)]
pub struct NoisyOracleEstimator {
    oracle: OracleEstimator,
    sigma: f64,
    seed: u64,
}

impl NoisyOracleEstimator {
    pub fn new(references: Arc<ReferenceTable>, sigma: f64, seed: u64) -> Self {
        NoisyOracleEstimator {
            oracle: OracleEstimator::new(references),
            sigma,
            seed,
        }
    }

    fn noise(&self, source: &str, hypothesis: &str) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((source.len() as u64).to_le_bytes());
        h.update(source.as_bytes());
        h.update(hypothesis.as_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        Normal::new(0.0, self.sigma).expect("sigma validated").sample(&mut rng)
    }
}

impl Estimator for NoisyOracleEstimator {
    fn name(&self) -> &str {
        "mock:noisy"
    }
    fn estimate(&self, source: &str, hypothesis: &str) -> Result<f64, BackendError> {
        let clean = self.oracle.estimate(source, hypothesis)?;
        Ok((clean + self.noise(source, hypothesis)).clamp(0.0, 100.0))
    }
}

/// Returns a fixed sequence of scores, one per call. Errors once exhausted.
#[derive(Debug, Default)]
pub struct ScriptedEstimator {
    scores: Mutex<VecDeque<f64>>,
}

impl ScriptedEstimator {
    pub fn new(scores: impl IntoIterator<Item = f64>) -> Self {
        ScriptedEstimator {
            scores: Mutex::new(scores.into_iter().collect()),
        }
    }
}

impl Estimator for ScriptedEstimator {
    fn name(&self) -> &str {
        "mock:scripted"
    }
    fn estimate(&self, _source: &str, _hypothesis: &str) -> Result<f64, BackendError> {
        self.scores
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| BackendError::Protocol("scripted estimator exhausted".into()))
    }
}
