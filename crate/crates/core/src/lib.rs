//! Explanation-augmented in-context learning (X-ICL) evaluation harness.

pub mod ablations;
pub mod corpus;
pub mod llm;
pub mod metrics;
pub mod nlegen;
pub mod prompting;
pub mod runner;
pub mod selection;
pub mod text;
