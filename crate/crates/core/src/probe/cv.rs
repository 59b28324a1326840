use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hsd::HsdRecord;
use super::softmax::{train_probe, ProbeHyperparams, ProbeModel};
use super::{DistressLevel, ProbeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvMetrics {
    pub macro_f1: f64,
    /// F1 for none, mild, moderate+; 0 for a class absent from both truth
    /// and predictions (such classes are left out of the macro average).
    pub per_class_f1: [f64; 3],
    pub accuracy: f64,
    pub n: usize,
    /// Rows: truth, columns: prediction.
    pub confusion: [[usize; 3]; 3],
}

pub fn classification_metrics(truth: &[DistressLevel], pred: &[DistressLevel]) -> CvMetrics {
    assert_eq!(truth.len(), pred.len(), "paired predictions");
    let mut confusion = [[0usize; 3]; 3];
    for (t, p) in truth.iter().zip(pred) {
        confusion[t.index()][p.index()] += 1;
    }
    let mut per_class_f1 = [0.0; 3];
    let mut present = 0usize;
    let mut total = 0.0;
    for k in 0..3 {
        let tp = confusion[k][k];
        let fn_: usize = confusion[k].iter().sum::<usize>() - tp;
        let fp: usize = (0..3).map(|r| confusion[r][k]).sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            per_class_f1[k] = 2.0 * tp as f64 / denom as f64;
            total += per_class_f1[k];
            present += 1;
        }
    }
    let correct: usize = (0..3).map(|k| confusion[k][k]).sum();
    CvMetrics {
        macro_f1: if present > 0 { total / present as f64 } else { 0.0 },
        per_class_f1,
        accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
        n: truth.len(),
        confusion,
    }
}

/// Labeled examples for a single layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerData {
    pub record_ids: Vec<String>,
    pub group_ids: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<DistressLevel>,
}

impl LayerData {
    /// Split labeled HSD records by layer; unlabeled records are skipped.
    pub fn from_records(records: &[HsdRecord]) -> BTreeMap<u16, LayerData> {
        let mut out: BTreeMap<u16, LayerData> = BTreeMap::new();
        for r in records {
            let Some(label) = r.label else { continue };
            let d = out.entry(r.layer).or_default();
            d.record_ids.push(r.record_id.clone());
            d.group_ids.push(r.group_id.clone());
            d.vectors.push(r.vector.clone());
            d.labels.push(label);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (Vec<&[f32]>, Vec<DistressLevel>) {
        (
            idx.iter().map(|&i| self.vectors[i].as_slice()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Fold index per example; whole groups are dealt round-robin to folds after
/// a seeded shuffle.
pub fn grouped_folds(group_ids: &[String], k: usize, seed: u64) -> Result<Vec<usize>, ProbeError> {
    let groups: BTreeSet<&str> = group_ids.iter().map(String::as_str).collect();
    if k < 2 || groups.len() < k {
        return Err(ProbeError::TooFewGroups {
            groups: groups.len(),
            folds: k,
        });
    }
    let mut order: Vec<&str> = groups.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, g)| (*g, i % k)).collect();
    Ok(group_ids.iter().map(|g| fold_of[g.as_str()]).collect())
}

/// Probe trained on every example outside `test_fold`.
pub fn fit_fold(
    layer: u16,
    data: &LayerData,
    folds: &[usize],
    test_fold: usize,
    hyper: &ProbeHyperparams,
) -> Result<ProbeModel, ProbeError> {
    let train: Vec<usize> = (0..data.len()).filter(|&i| folds[i] != test_fold).collect();
    let (rows, labels) = data.rows(&train);
    train_probe(layer, &rows, &labels, hyper)
}

/// Pooled out-of-fold metrics for one layer.
pub fn cross_validate(
    layer: u16,
    data: &LayerData,
    k: usize,
    seed: u64,
    hyper: &ProbeHyperparams,
) -> Result<CvMetrics, ProbeError> {
    let folds = grouped_folds(&data.group_ids, k, seed)?;
    let mut pred = vec![DistressLevel::None; data.len()];
    for f in 0..k {
        let model = fit_fold(layer, data, &folds, f, hyper)?;
        for i in (0..data.len()).filter(|&i| folds[i] == f) {
            pred[i] = model.predict(&data.vectors[i])?;
        }
    }
    Ok(classification_metrics(&data.labels, &pred))
}

pub fn cross_validate_layers(
    data: &BTreeMap<u16, LayerData>,
    k: usize,
    seed: u64,
    hyper: &ProbeHyperparams,
) -> Result<BTreeMap<u16, CvMetrics>, ProbeError> {
    data.par_iter()
        .map(|(&layer, d)| Ok((layer, cross_validate(layer, d, k, seed, hyper)?)))
        .collect()
}
