//! Contingency tests with FDR control, effect sizes and per-tag logistic
//! regressions over the tidy turn table.

mod analysis;
mod contingency;
mod fdr;
mod logit;
mod mixed;
mod models;
pub mod special;
mod tidy;

use thiserror::Error;

use crate::ssbc::SsbcLabel;
use crate::store::StoreError;

pub use analysis::{
    per_tag_contingency, per_tag_regression, AnalysisOptions, ContingencyAnalysis,
    RegressionAnalysis, TagFailure, DEFAULT_REFERENCE_COMMUNITY,
};
pub use contingency::{
    chi_square, contingency_table, cramers_v, delta_pp, test_tag, ChiSquare, ContingencyResult,
    ContingencyTable, LOW_EXPECTED,
};
pub use fdr::{bh_fdr, BhResult, DEFAULT_Q};
pub use logit::{
    bernoulli_log_likelihood, clustered_covariance, clustered_se, fit_logistic, sigmoid, LogitFit,
    IRLS_TOL, MAX_IRLS_ITER,
};
pub use mixed::{
    fit_random_intercept_logit, LaplaceObjective, RandomInterceptFit, RandomInterceptOptions,
    RobustFallback, MIN_CLUSTERS,
};
pub use models::{
    build_design, community_term, ClusterRobustLogit, Design, ModelFit, ModelRegistry, PlainLogit,
    RandomInterceptLogit, RegressionMethod, RegressionResult, TagModel, TurnPosition,
    DISTRESS_TERM, INTERCEPT, TURN_TERM,
};
pub use tidy::{build_tidy, tidy_to_csv, write_tidy_csv, Condition, TidyTurnRecord};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("table has a zero row or column total")]
    ZeroMarginal,
    #[error("only one `{0}` level present")]
    SingleLevel(String),
    #[error("tag `{}` is constant across records", .0.name())]
    Degenerate(SsbcLabel),
    #[error("design has {rows} rows for {cols} columns")]
    TooFewRows { rows: usize, cols: usize },
    #[error("outcome is perfectly or quasi-perfectly separated; estimates are unbounded")]
    Separation,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("{found} clusters, at least {min} required")]
    TooFewClusters { found: usize, min: usize },
    #[error("unknown regression method `{0}`")]
    UnknownMethod(String),
    #[error("reference community `{0}` not present")]
    UnknownReference(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("no records")]
    EmptyInput,
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<csv::Error> for StatsError {
    fn from(e: csv::Error) -> Self {
        StatsError::Csv(e.to_string())
    }
}
