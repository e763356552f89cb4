//! Maximum-discrepancy competition for ranking image classifiers.
//!
//! For every pair of classifiers the images on which their top-1
//! predictions are confident and semantically furthest apart are selected,
//! labeled by annotators (or a simulated oracle), and the pairwise outcomes
//! are aggregated into a global ranking through the principal eigenvector
//! of a dominance matrix.

pub mod error;
pub mod exec;
pub mod fmt;
pub mod labeling;
pub mod pipeline;
pub mod predictions;
pub mod ranking;
pub mod selection;
pub mod session;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
pub use exec::Exec;
pub use labeling::{
    aggregate_votes, run_labeling, AnnotationVote, AnnotatorId, AnswerSource, Case, LabelQuery, LabelStore,
    LabelVerdict, OracleLabels, VotingRule,
};
pub use pipeline::{add_model, run_competition, CompetitionConfig, CompetitionRun, Extension};
pub use predictions::{Confidence, ImageId, ModelId, Prediction, PredictionRecord, PredictionTable};
pub use ranking::{
    pairwise_accuracy, perron_rank, srcc, topk_stability, CaseTally, CompetitionState, Matrix, PerronVector,
    RankSettings, Smoothing,
};
pub use selection::{all_pairs, select_all, Candidate, Pair, PairSubset, SelectionConfig, TestSet};
pub use session::{Session, SessionError, SessionState};
pub use taxonomy::{LabelId, NodeId, TaxonomyGraph, WeightScheme};
