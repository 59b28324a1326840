use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cv::{CvMetrics, LayerData};
use super::softmax::{train_probe, ProbeHyperparams, ProbeModel};
use super::{DistressEstimate, DistressLevel, ProbeError};

pub const DEFAULT_K: usize = 3;
const TIE_EPS: f64 = 1e-12;

/// Top-K layer probes, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProbe {
    pub members: Vec<ProbeModel>,
}

impl EnsembleProbe {
    pub fn layers(&self) -> Vec<u16> {
        self.members.iter().map(|m| m.layer).collect()
    }
}

/// Argmax with near-ties resolved toward the more severe class.
pub(crate) fn argmax_high(p: &[f64; 3]) -> DistressLevel {
    let mut best = 0;
    for k in 1..3 {
        if p[k] >= p[best] - TIE_EPS {
            best = k;
        }
    }
    DistressLevel::from_index(best).expect("three classes")
}

/// The `k` best layers by macro-F1, ties to the lower layer index.
pub fn rank_layers(macro_f1: &BTreeMap<u16, f64>, k: usize) -> Result<Vec<u16>, ProbeError> {
    if k == 0 || k > macro_f1.len() {
        return Err(ProbeError::NotEnoughLayers {
            k,
            available: macro_f1.len(),
        });
    }
    let mut ranked: Vec<(u16, f64)> = macro_f1.iter().map(|(&l, &f)| (l, f)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(l, _)| l).collect())
}

/// Select the top `k` layers and refit each probe on all labeled data.
pub fn build_ensemble(
    data: &BTreeMap<u16, LayerData>,
    metrics: &BTreeMap<u16, CvMetrics>,
    k: usize,
    hyper: &ProbeHyperparams,
) -> Result<EnsembleProbe, ProbeError> {
    let scores = metrics.iter().map(|(&l, m)| (l, m.macro_f1)).collect();
    let layers = rank_layers(&scores, k)?;
    let members = layers
        .into_iter()
        .map(|layer| {
            let d = data.get(&layer).ok_or(ProbeError::MissingLayer(layer))?;
            let rows: Vec<&[f32]> = d.vectors.iter().map(Vec::as_slice).collect();
            let mut model = train_probe(layer, &rows, &d.labels, hyper)?;
            model.cv_metrics = Some(metrics[&layer].clone());
            Ok(model)
        })
        .collect::<Result<Vec<_>, ProbeError>>()?;
    Ok(EnsembleProbe { members })
}

/// Elementwise mean of member probabilities, renormalized.
pub fn combine_probabilities(member_probs: &[[f64; 3]]) -> DistressEstimate {
    let mut avg = [0.0; 3];
    for p in member_probs {
        for k in 0..3 {
            avg[k] += p[k];
        }
    }
    let total: f64 = avg.iter().sum();
    for v in avg.iter_mut() {
        *v /= total;
    }
    DistressEstimate {
        level: argmax_high(&avg),
        probabilities: avg,
    }
}

pub fn ensemble_predict(
    ensemble: &EnsembleProbe,
    vectors: &BTreeMap<u16, Vec<f32>>,
) -> Result<DistressEstimate, ProbeError> {
    let probs = ensemble
        .members
        .iter()
        .map(|m| {
            let v = vectors.get(&m.layer).ok_or(ProbeError::MissingLayer(m.layer))?;
            m.predict_proba(v)
        })
        .collect::<Result<Vec<_>, ProbeError>>()?;
    Ok(combine_probabilities(&probs))
}
