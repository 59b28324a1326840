//! Layerwise linear distress probes over last-token hidden states.
//!
//! Teacher-labeled conversation prefixes are run through the agent model by an
//! external extractor, which returns one vector per layer (stored in the HSD
//! container). A multinomial logistic probe is trained per layer, scored with
//! dialogue-grouped cross-validation, and the best layers form an ensemble
//! whose averaged probabilities give the turn-level distress estimate.

mod cv;
mod ensemble;
mod extractor;
mod hsd;
mod human;
mod prefix;
mod prompt;
mod softmax;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cv::{
    classification_metrics, cross_validate, cross_validate_layers, fit_fold, grouped_folds, CvMetrics,
    LayerData,
};
pub use ensemble::{
    build_ensemble, combine_probabilities, ensemble_predict, rank_layers, EnsembleProbe, DEFAULT_K,
};
pub use extractor::{
    AllLayers, ExtractionRequest, ExtractionResponse, HiddenStateClient, LayerSelection, LayerVector,
    HIDDEN_STATES_PATH,
};
pub use hsd::{decode_hsd, encode_hsd, read_hsd, write_hsd, HsdError, HsdRecord, HSD_MAGIC, HSD_VERSION};
pub use human::{compare_with_human, quadratic_weighted_kappa, HumanComparison};
pub use prefix::{
    build_prefix_dataset, enumerate_prefixes, sample_equal_contribution, PrefixDataset,
    PrefixRecord, PrefixStats, SourceDialogue,
};
pub use prompt::{
    build_distress_prompt, parse_distress_response, Confidence, DistressJudgement,
    DEFAULT_DISTRESS_RUBRIC, DISTRESS_TEMPLATE,
};
pub use softmax::{
    train_probe, ProbeHyperparams, ProbeModel, SoftmaxProblem, Standardizer, TrainingSummary,
    MIN_TRAINING_EXAMPLES,
};

/// Ordinal distress severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistressLevel {
    #[serde(rename = "none")]
    None = 0,
    #[serde(rename = "mild")]
    Mild = 1,
    #[serde(rename = "moderate+", alias = "moderate_plus")]
    ModeratePlus = 2,
}

impl DistressLevel {
    pub const ALL: [DistressLevel; 3] = [DistressLevel::None, DistressLevel::Mild, DistressLevel::ModeratePlus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistressLevel::None => "none",
            DistressLevel::Mild => "mild",
            DistressLevel::ModeratePlus => "moderate+",
        }
    }
}

impl fmt::Display for DistressLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistressLevel {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(DistressLevel::None),
            "mild" => Ok(DistressLevel::Mild),
            "moderate+" | "moderate_plus" => Ok(DistressLevel::ModeratePlus),
            other => Err(ProbeError::UnknownLevel(other.to_string())),
        }
    }
}

/// Turn-level estimate: ensemble probabilities over (none, mild, moderate+).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistressEstimate {
    pub level: DistressLevel,
    pub probabilities: [f64; 3],
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("unknown distress level `{0}`")]
    UnknownLevel(String),
    #[error("training data has a single class")]
    SingleClass,
    #[error("need at least {min} labeled examples, got {got}")]
    TooFewExamples { min: usize, got: usize },
    #[error("non-finite feature value in record `{0}`")]
    NonFinite(String),
    #[error("vector dimension {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{groups} groups cannot fill {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },
    #[error("ensemble of {k} layers requested but only {available} evaluated")]
    NotEnoughLayers { k: usize, available: usize },
    #[error("no vector for ensemble layer {0}")]
    MissingLayer(u16),
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("no severity in teacher response")]
    NoSeverity,
    #[error("severity `{0}` is not one of None, Mild, Moderate+")]
    InvalidSeverity(String),
    #[error("no posts shared between estimates and human labels")]
    NoOverlap,
    #[error(transparent)]
    Hsd(#[from] HsdError),
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
}
