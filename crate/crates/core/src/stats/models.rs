use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::logit::{clustered_se, fit_logistic};
use super::mixed::{fit_random_intercept_logit, RandomInterceptOptions};
use super::tidy::{Condition, TidyTurnRecord};
use super::StatsError;
use crate::ssbc::SsbcLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionMethod {
    Plain,
    ClusterRobust,
    RandomIntercept,
}

impl RegressionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RegressionMethod::Plain => "plain",
            RegressionMethod::ClusterRobust => "cluster_robust",
            RegressionMethod::RandomIntercept => "random_intercept",
        }
    }
}

/// How turn position enters the design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnPosition {
    /// 0-based turn index.
    #[default]
    RawIndex,
    /// Index divided by the conversation's last index.
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub terms: Vec<String>,
    pub clusters: Vec<String>,
}

pub const INTERCEPT: &str = "intercept";
pub const DISTRESS_TERM: &str = "distress";
pub const TURN_TERM: &str = "turn_position";

pub fn community_term(community: &str) -> String {
    format!("community[{community}]")
}

fn strip_prefix(c: &str) -> &str {
    c.strip_prefix("r/").unwrap_or(c)
}

/// Intercept, numeric distress (0-2) and turn position, plus treatment-coded
/// community dummies when the condition is community.
pub fn build_design(
    records: &[TidyTurnRecord],
    condition: Condition,
    turn_position: TurnPosition,
    reference_community: &str,
) -> Result<Design, StatsError> {
    if records.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let mut terms = vec![INTERCEPT.to_string(), DISTRESS_TERM.to_string(), TURN_TERM.to_string()];
    let mut dummies = Vec::new();
    if condition == Condition::Community {
        let levels: BTreeSet<&str> = records.iter().map(|r| r.community.as_str()).collect();
        let reference = levels
            .iter()
            .find(|l| strip_prefix(l) == strip_prefix(reference_community))
            .ok_or_else(|| StatsError::UnknownReference(reference_community.to_string()))?;
        dummies = levels.iter().filter(|l| *l != reference).map(|l| l.to_string()).collect();
        terms.extend(dummies.iter().map(|d| community_term(d)));
    }
    let mut last_turn: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let e = last_turn.entry(&r.conv_id).or_default();
        *e = (*e).max(r.turn_index);
    }
    let x = DMatrix::from_fn(records.len(), terms.len(), |i, j| {
        let r = &records[i];
        match j {
            0 => 1.0,
            1 => r.distress_level.index() as f64,
            2 => match turn_position {
                TurnPosition::RawIndex => r.turn_index as f64,
                TurnPosition::Normalized => {
                    let last = last_turn[r.conv_id.as_str()];
                    if last == 0 {
                        0.0
                    } else {
                        r.turn_index as f64 / last as f64
                    }
                }
            },
            _ => f64::from(u8::from(r.community == dummies[j - 3])),
        }
    });
    Ok(Design {
        x,
        terms,
        clusters: records.iter().map(|r| r.conv_id.clone()).collect(),
    })
}

/// Fitted coefficients in design-term order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub random_intercept_sd: Option<f64>,
    pub converged: bool,
    pub flags: Vec<String>,
}

/// A per-tag regression estimator selectable by name.
pub trait TagModel: Send + Sync {
    fn method(&self) -> RegressionMethod;
    fn fit(&self, design: &Design, y: &[f64]) -> Result<ModelFit, StatsError>;
}

pub struct PlainLogit;

impl TagModel for PlainLogit {
    fn method(&self) -> RegressionMethod {
        RegressionMethod::Plain
    }

    fn fit(&self, design: &Design, y: &[f64]) -> Result<ModelFit, StatsError> {
        let f = fit_logistic(&design.x, y)?;
        if f.separation {
            return Err(StatsError::Separation);
        }
        Ok(ModelFit {
            p_values: f.p_values(&f.std_errors),
            coefficients: f.coefficients,
            std_errors: f.std_errors,
            random_intercept_sd: None,
            converged: f.converged,
            flags: Vec::new(),
        })
    }
}

pub struct ClusterRobustLogit;

impl TagModel for ClusterRobustLogit {
    fn method(&self) -> RegressionMethod {
        RegressionMethod::ClusterRobust
    }

    fn fit(&self, design: &Design, y: &[f64]) -> Result<ModelFit, StatsError> {
        let f = fit_logistic(&design.x, y)?;
        let se = clustered_se(&f, &design.x, y, &design.clusters)?;
        if f.separation {
            return Err(StatsError::Separation);
        }
        Ok(ModelFit {
            p_values: f.p_values(&se),
            coefficients: f.coefficients,
            std_errors: se,
            random_intercept_sd: None,
            converged: f.converged,
            flags: Vec::new(),
        })
    }
}

#[derive(Default)]
pub struct RandomInterceptLogit {
    pub options: RandomInterceptOptions,
}

impl TagModel for RandomInterceptLogit {
    fn method(&self) -> RegressionMethod {
        RegressionMethod::RandomIntercept
    }

    fn fit(&self, design: &Design, y: &[f64]) -> Result<ModelFit, StatsError> {
        let f = fit_random_intercept_logit(&design.x, y, &design.clusters, &self.options)?;
        match f.fallback {
            None => Ok(ModelFit {
                coefficients: f.coefficients,
                std_errors: f.std_errors,
                p_values: f.p_values,
                random_intercept_sd: Some(f.sigma_u),
                converged: true,
                flags: Vec::new(),
            }),
            Some(fb) => Ok(ModelFit {
                coefficients: fb.coefficients,
                std_errors: fb.std_errors,
                p_values: fb.p_values,
                random_intercept_sd: None,
                converged: false,
                flags: vec!["random_intercept_not_converged; cluster_robust_fallback".to_string()],
            }),
        }
    }
}

/// Regression estimators keyed by method name.
pub struct ModelRegistry {
    models: BTreeMap<&'static str, Box<dyn TagModel>>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        ModelRegistry {
            models: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, model: Box<dyn TagModel>) {
        self.models.insert(model.method().as_str(), model);
    }

    pub fn get(&self, name: &str) -> Result<&dyn TagModel, StatsError> {
        self.models
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| StatsError::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.models.keys().copied().collect()
    }

    pub fn with_options(options: RandomInterceptOptions) -> Self {
        let mut r = Self::empty();
        r.register(Box::new(PlainLogit));
        r.register(Box::new(ClusterRobustLogit));
        r.register(Box::new(RandomInterceptLogit { options }));
        r
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_options(RandomInterceptOptions::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub tag: SsbcLabel,
    pub condition: Condition,
    pub method: RegressionMethod,
    pub n: usize,
    pub terms: Vec<String>,
    pub coefficients: BTreeMap<String, f64>,
    pub std_errors: BTreeMap<String, f64>,
    pub p_values: BTreeMap<String, f64>,
    /// BH-adjusted per term across the tags of one analysis.
    pub p_fdr: BTreeMap<String, f64>,
    pub odds_ratios: BTreeMap<String, f64>,
    pub random_intercept_sd: Option<f64>,
    pub converged: bool,
    pub flags: Vec<String>,
}

impl RegressionResult {
    pub fn from_fit(tag: SsbcLabel, condition: Condition, method: RegressionMethod, design: &Design, fit: ModelFit) -> Self {
        let named = |v: &[f64]| -> BTreeMap<String, f64> {
            design.terms.iter().cloned().zip(v.iter().copied()).collect()
        };
        let odds: Vec<f64> = fit.coefficients.iter().map(|b| b.exp()).collect();
        RegressionResult {
            tag,
            condition,
            method,
            n: design.x.nrows(),
            terms: design.terms.clone(),
            coefficients: named(&fit.coefficients),
            std_errors: named(&fit.std_errors),
            p_values: named(&fit.p_values),
            p_fdr: named(&fit.p_values),
            odds_ratios: named(&odds),
            random_intercept_sd: fit.random_intercept_sd,
            converged: fit.converged,
            flags: fit.flags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::DistressLevel;
    use crate::ssbc::LabelSet;

    fn rec(conv: &str, turn: usize, community: &str) -> TidyTurnRecord {
        TidyTurnRecord {
            conv_id: conv.into(),
            turn_index: turn,
            community: community.into(),
            distress_level: DistressLevel::Mild,
            labels: LabelSet::new(),
        }
    }

    #[test]
    fn registry_lookup() {
        let r = ModelRegistry::default();
        assert_eq!(r.names(), vec!["cluster_robust", "plain", "random_intercept"]);
        assert_eq!(r.get("plain").unwrap().method(), RegressionMethod::Plain);
        assert!(matches!(r.get("bayes"), Err(StatsError::UnknownMethod(_))));
    }

    #[test]
    fn design_columns() {
        let rs = vec![rec("a", 0, "r/AskMen"), rec("a", 2, "r/AskMen"), rec("b", 0, "r/TwoXChromosomes")];
        let d = build_design(&rs, Condition::Community, TurnPosition::Normalized, "TwoXChromosomes").unwrap();
        assert_eq!(d.terms, vec!["intercept", "distress", "turn_position", "community[r/AskMen]"]);
        assert_eq!(d.x.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(d.x[(2, 3)], 0.0);
        let d = build_design(&rs, Condition::Distress, TurnPosition::RawIndex, "x").unwrap();
        assert_eq!(d.terms.len(), 3);
        assert_eq!(d.x[(1, 2)], 2.0);
        assert!(matches!(
            build_design(&rs, Condition::Community, TurnPosition::RawIndex, "r/Nope"),
            Err(StatsError::UnknownReference(_))
        ));
    }
}
