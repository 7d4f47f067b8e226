//! In-context example selection for few-shot machine translation.
//!
//! Examples are retrieved with BM25, then a greedy search grows the prompt
//! one example at a time and keeps the prefix whose translation a
//! reference-free quality estimator scores highest.

pub mod backends;
pub mod corpus;
pub mod metrics;
pub mod prompt;
pub mod retriever;
pub mod runner;
pub mod search;
pub mod synthetic;
