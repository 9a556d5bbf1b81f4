//! Human evaluation of NLEs: blind assignments, an append-only rating log
//! and score/reason summaries, served over HTTP.

pub mod eval_set;
pub mod server;
pub mod store;
pub mod summary;

use std::path::Path;

use thiserror::Error;

pub use eval_set::{
    build_eval_set, even_split, Candidate, EvalAssignment, EvalItem, EvalSet, EvalSetSpec, LabelKind, Overlap,
    Sampling, SourcePool,
};
pub use server::{router, serve, AppState, AssignmentPayload, PublicItem, ServeConfig, TOKEN_HEADER};
pub use store::{read_log, RatingRecord, RatingStore, Reason, StoreState, StoredId, StoredRating};
pub use summary::{summarize_ratings, AnnotatorMean, RatingSummary, ReasonShare, ScoreDistribution};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotateError {
    #[error("need {need} eligible items, only {have} available")]
    InsufficientItems { need: usize, have: usize },
    #[error("invalid eval-set spec: {0}")]
    InvalidSpec(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),
    #[error("item {item} is not assigned to {annotator}")]
    NotAssigned { item: String, annotator: String },
    #[error("score {score} with {reasons} reasons: reasons are required for scores 1-2 and not allowed otherwise")]
    InvalidReasons { score: u8, reasons: usize },
    #[error("score {0} is outside 1..=5")]
    InvalidScore(u8),
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("no ratings recorded yet")]
    EmptyStore,
    #[error("{0}")]
    Io(String),
}

impl AnnotateError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        AnnotateError::Io(format!("{}: {e}", path.display()))
    }
}
