//! Run configuration, the stage registry and the resumable stage runner.

mod config;
mod runner;
mod stages;

use thiserror::Error;

pub use config::{
    interpolate, AnnotateOptions, EndpointConfig, PipelineConfig, ProbeOptions, ReportOptions,
    Roles, ShardOptions, SimulateOptions,
};
pub use runner::{Pipeline, StageRegistry, StageStatus, StageSummary, STAGE_ORDER};
pub use stages::{
    analysis_conversations, annotation_record_id, annotator_hash, build_training_states,
    compute_agreement, infer_distress, load_estimates, select_probe_ensemble, train_layer_probes,
    AnalysisIssue, LayerMetricsRecord, Stage, StageContext, StageOutput, TurnEstimate,
};

use crate::corpus::CorpusError;
use crate::gateway::GatewayError;
use crate::probe::{HsdError, ProbeError};
use crate::report::ReportError;
use crate::shard::ShardError;
use crate::ssbc::{AgreementError, ConsensusError};
use crate::stats::StatsError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("stage `{stage}` needs `{missing}` to run first")]
    DependencyMissing { stage: String, missing: String },
    #[error("stage `{stage}`: {message}")]
    NoData { stage: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Hsd(#[from] HsdError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl PipelineError {
    pub(crate) fn no_data(stage: &str, message: impl Into<String>) -> Self {
        PipelineError::NoData {
            stage: stage.to_string(),
            message: message.into(),
        }
    }
}
