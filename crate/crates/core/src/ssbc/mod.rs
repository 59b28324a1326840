//! Social Support Behavior Code labels, annotation and agreement.

mod agreement;
mod annotate;
mod consensus;
mod prompt;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::{
    agreement_metrics, cohen_kappa, human_agreement, masi_distance, pair_f1, pair_jaccard,
    AgreementError, HumanAgreementReport, LabelKappa, LabeledTurn, StabilityReport,
    MIN_KAPPA_POSITIVES,
};
pub use annotate::{
    annotate_run, annotate_single_turns, AnnotationFlag, AnnotationRecord, AnnotationRun,
    TurnKey,
};
pub use consensus::{
    consensus, consensus_labels, ConsensusError, ConsensusRecord, CONSENSUS_RUNS, QUORUM,
};
pub use prompt::{
    build_annotation_prompt, codebook_hash, AnnotationError, normalize_label, parse_annotation_response,
    ANNOTATION_TEMPLATE, CODEBOOK,
};

/// The twelve analyzed labels, declared in codebook table order. The derived
/// `Ord` is that order and serves as the deterministic tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsbcLabel {
    Sympathy,
    Empathy,
    Encouragement,
    Advice,
    Referral,
    SituationalAppraisal,
    Teaching,
    Compliment,
    Validation,
    ReliefOfBlame,
    Companions,
    Presence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Emotional,
    Informational,
    Esteem,
    Network,
}

impl Category {
    pub fn short(self) -> &'static str {
        match self {
            Category::Emotional => "Emo",
            Category::Informational => "Info",
            Category::Esteem => "Est",
            Category::Network => "Net",
        }
    }
}

impl SsbcLabel {
    pub const ALL: [SsbcLabel; 12] = [
        SsbcLabel::Sympathy,
        SsbcLabel::Empathy,
        SsbcLabel::Encouragement,
        SsbcLabel::Advice,
        SsbcLabel::Referral,
        SsbcLabel::SituationalAppraisal,
        SsbcLabel::Teaching,
        SsbcLabel::Compliment,
        SsbcLabel::Validation,
        SsbcLabel::ReliefOfBlame,
        SsbcLabel::Companions,
        SsbcLabel::Presence,
    ];

    pub fn category(self) -> Category {
        use SsbcLabel::*;
        match self {
            Sympathy | Empathy | Encouragement => Category::Emotional,
            Advice | Referral | SituationalAppraisal | Teaching => Category::Informational,
            Compliment | Validation | ReliefOfBlame => Category::Esteem,
            Companions | Presence => Category::Network,
        }
    }

    pub fn name(self) -> &'static str {
        use SsbcLabel::*;
        match self {
            Sympathy => "sympathy",
            Empathy => "empathy",
            Encouragement => "encouragement",
            Advice => "advice",
            Referral => "referral",
            SituationalAppraisal => "situational_appraisal",
            Teaching => "teaching",
            Compliment => "compliment",
            Validation => "validation",
            ReliefOfBlame => "relief_of_blame",
            Companions => "companions",
            Presence => "presence",
        }
    }

    /// Human-readable label as used in tables.
    pub fn display_name(self) -> &'static str {
        match self {
            SsbcLabel::SituationalAppraisal => "sit. appraisal",
            SsbcLabel::ReliefOfBlame => "relief of blame",
            other => other.name(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SsbcLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("unknown SSBC label `{0}`")]
    Unknown(String),
    #[error("a label set holds at most 3 labels, got {0}")]
    TooMany(usize),
}

impl FromStr for SsbcLabel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_label(s).ok_or_else(|| LabelError::Unknown(s.to_string()))
    }
}

pub const MAX_LABELS: usize = 3;

/// Up to three distinct labels, iterated in codebook order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<SsbcLabel>", into = "Vec<SsbcLabel>")]
pub struct LabelSet(BTreeSet<SsbcLabel>);

impl LabelSet {
    pub fn new() -> Self {
        LabelSet(BTreeSet::new())
    }

    pub fn from_labels(labels: impl IntoIterator<Item = SsbcLabel>) -> Result<Self, LabelError> {
        let set: BTreeSet<SsbcLabel> = labels.into_iter().collect();
        if set.len() > MAX_LABELS {
            return Err(LabelError::TooMany(set.len()));
        }
        Ok(LabelSet(set))
    }

    pub fn insert(&mut self, label: SsbcLabel) -> Result<bool, LabelError> {
        if self.0.contains(&label) {
            return Ok(false);
        }
        if self.0.len() >= MAX_LABELS {
            return Err(LabelError::TooMany(self.0.len() + 1));
        }
        Ok(self.0.insert(label))
    }

    pub fn contains(&self, label: SsbcLabel) -> bool {
        self.0.contains(&label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = SsbcLabel> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn union_len(&self, other: &LabelSet) -> usize {
        self.0.union(&other.0).count()
    }

    pub fn is_subset(&self, other: &LabelSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn as_set(&self) -> &BTreeSet<SsbcLabel> {
        &self.0
    }
}

impl TryFrom<Vec<SsbcLabel>> for LabelSet {
    type Error = LabelError;

    fn try_from(v: Vec<SsbcLabel>) -> Result<Self, Self::Error> {
        LabelSet::from_labels(v)
    }
}

impl From<LabelSet> for Vec<SsbcLabel> {
    fn from(s: LabelSet) -> Self {
        s.0.into_iter().collect()
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(SsbcLabel::name).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_mapping() {
        let count = |c| SsbcLabel::ALL.iter().filter(|l| l.category() == c).count();
        assert_eq!(count(Category::Emotional), 3);
        assert_eq!(count(Category::Informational), 4);
        assert_eq!(count(Category::Esteem), 3);
        assert_eq!(count(Category::Network), 2);
        assert_eq!(SsbcLabel::Teaching.category(), Category::Informational);
        assert_eq!(SsbcLabel::ReliefOfBlame.category(), Category::Esteem);
    }

    #[test]
    fn order_is_declaration_order() {
        for (i, l) in SsbcLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
        }
    }

    #[test]
    fn label_set_caps_at_three() {
        use SsbcLabel::*;
        let mut s = LabelSet::from_labels([Advice, Teaching]).unwrap();
        assert!(s.insert(Validation).unwrap());
        assert!(!s.insert(Advice).unwrap());
        assert!(s.insert(Presence).is_err());
        assert!(LabelSet::from_labels([Advice, Teaching, Validation, Presence]).is_err());
        assert!(serde_json::from_str::<LabelSet>(r#"["advice","teaching","validation","presence"]"#).is_err());
    }

    #[test]
    fn serializes_in_codebook_order() {
        use SsbcLabel::*;
        let s = LabelSet::from_labels([Validation, Advice]).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"["advice","validation"]"#);
    }
}
