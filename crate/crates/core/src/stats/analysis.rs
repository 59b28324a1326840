use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::contingency::{test_tag, ContingencyResult};
use super::fdr::{bh_fdr, DEFAULT_Q};
use super::models::{build_design, RegressionResult, TagModel, TurnPosition};
use super::tidy::{Condition, TidyTurnRecord};
use super::StatsError;
use crate::ssbc::SsbcLabel;

pub const DEFAULT_REFERENCE_COMMUNITY: &str = "r/TwoXChromosomes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub q: f64,
    /// Registered regression method name.
    pub method: String,
    pub reference_community: String,
    pub turn_position: TurnPosition,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            q: DEFAULT_Q,
            method: "random_intercept".to_string(),
            reference_community: DEFAULT_REFERENCE_COMMUNITY.to_string(),
            turn_position: TurnPosition::RawIndex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagFailure {
    pub tag: SsbcLabel,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyAnalysis {
    pub condition: Condition,
    pub q: f64,
    pub results: Vec<ContingencyResult>,
    pub failures: Vec<TagFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionAnalysis {
    pub condition: Condition,
    pub q: f64,
    pub results: Vec<RegressionResult>,
    pub failures: Vec<TagFailure>,
}

fn split<T>(outcomes: Vec<(SsbcLabel, Result<T, StatsError>)>) -> (Vec<T>, Vec<TagFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (tag, r) in outcomes {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                warn!(tag = tag.name(), error = %e, "tag analysis failed");
                failed.push(TagFailure {
                    tag,
                    error: e.to_string(),
                })
            }
        }
    }
    (ok, failed)
}

/// Chi-squared test for every tag with BH adjustment across the tags that
/// could be tested.
pub fn per_tag_contingency(
    records: &[TidyTurnRecord],
    condition: Condition,
    q: f64,
) -> Result<ContingencyAnalysis, StatsError> {
    if records.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let outcomes = SsbcLabel::ALL
        .par_iter()
        .map(|&tag| (tag, test_tag(records, tag, condition)))
        .collect();
    let (mut results, failures) = split(outcomes);
    let p: Vec<f64> = results.iter().map(|r| r.p).collect();
    let bh = bh_fdr(&p, q)?;
    for ((r, adj), rej) in results.iter_mut().zip(bh.adjusted).zip(bh.reject) {
        r.p_fdr = adj;
        r.significant = rej;
    }
    Ok(ContingencyAnalysis {
        condition,
        q,
        results,
        failures,
    })
}

/// One regression per tag; BH is applied per term across tags.
pub fn per_tag_regression(
    records: &[TidyTurnRecord],
    condition: Condition,
    model: &dyn TagModel,
    options: &AnalysisOptions,
) -> Result<RegressionAnalysis, StatsError> {
    let design = build_design(records, condition, options.turn_position, &options.reference_community)?;
    let outcomes = SsbcLabel::ALL
        .par_iter()
        .map(|&tag| {
            let y: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.has(tag)))).collect();
            if y.iter().all(|&v| v == y[0]) {
                return (tag, Err(StatsError::Degenerate(tag)));
            }
            let fit = model
                .fit(&design, &y)
                .map(|f| RegressionResult::from_fit(tag, condition, model.method(), &design, f));
            (tag, fit)
        })
        .collect();
    let (mut results, failures) = split(outcomes);
    for term in &design.terms {
        let idx: Vec<usize> = (0..results.len())
            .filter(|&i| results[i].p_values.get(term).is_some_and(|p| p.is_finite()))
            .collect();
        let p: Vec<f64> = idx.iter().map(|&i| results[i].p_values[term]).collect();
        let bh = bh_fdr(&p, options.q)?;
        for (&i, adj) in idx.iter().zip(bh.adjusted) {
            results[i].p_fdr.insert(term.clone(), adj);
        }
    }
    Ok(RegressionAnalysis {
        condition,
        q: options.q,
        results,
        failures,
    })
}

impl ContingencyAnalysis {
    pub fn by_tag(&self) -> BTreeMap<SsbcLabel, &ContingencyResult> {
        self.results.iter().map(|r| (r.tag, r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::DistressLevel;
    use crate::ssbc::LabelSet;

    /// Teaching depends strongly on distress; every other tag is balanced.
    fn fixture() -> Vec<TidyTurnRecord> {
        let mut rows = Vec::new();
        for i in 0..120 {
            let level = DistressLevel::from_index(i % 3).unwrap();
            let mut labels = Vec::new();
            let teaching = match level {
                DistressLevel::None => i % 12 < 9,
                DistressLevel::Mild => i % 12 < 5,
                DistressLevel::ModeratePlus => i % 12 < 1,
            };
            if teaching {
                labels.push(SsbcLabel::Teaching);
            }
            // independent of distress: present on half of each level
            if (i / 3) % 2 == 0 {
                labels.push(SsbcLabel::Advice);
            }
            rows.push(TidyTurnRecord {
                conv_id: format!("c{}", i / 6),
                turn_index: i % 6,
                community: "x".into(),
                distress_level: level,
                labels: LabelSet::from_labels(labels).unwrap(),
            });
        }
        rows
    }

    #[test]
    fn only_the_dependent_tag_is_rejected() {
        let a = per_tag_contingency(&fixture(), Condition::Distress, 0.05).unwrap();
        let sig: Vec<SsbcLabel> = a.results.iter().filter(|r| r.significant).map(|r| r.tag).collect();
        assert_eq!(sig, vec![SsbcLabel::Teaching]);
        // ten tags never appear
        assert_eq!(a.failures.len(), 10);
        assert!(a.results.iter().all(|r| r.p_fdr >= r.p));
    }

    #[test]
    fn record_order_does_not_matter() {
        let rows = fixture();
        let mut rev = rows.clone();
        rev.reverse();
        let a = per_tag_contingency(&rows, Condition::Distress, 0.05).unwrap();
        let b = per_tag_contingency(&rev, Condition::Distress, 0.05).unwrap();
        assert_eq!(a, b);
    }
}
