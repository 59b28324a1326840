use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DistressLevel, ProbeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanComparison {
    pub n: usize,
    pub exact_match_rate: f64,
    /// `None` when the expected disagreement is zero.
    pub quadratic_weighted_kappa: Option<f64>,
    /// Rows: human label, columns: estimate.
    pub confusion: [[usize; 3]; 3],
    /// Each confusion row as shares of its total.
    pub row_shares: [[f64; 3]; 3],
}

/// Quadratic-weighted kappa of a square confusion matrix.
pub fn quadratic_weighted_kappa(confusion: &[[usize; 3]; 3]) -> Option<f64> {
    let n: usize = confusion.iter().flatten().sum();
    if n == 0 {
        return None;
    }
    let n = n as f64;
    let rows: Vec<f64> = confusion.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..3).map(|j| (0..3).map(|i| confusion[i][j]).sum::<usize>() as f64).collect();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let w = ((i as f64 - j as f64) / 2.0).powi(2);
            observed += w * confusion[i][j] as f64 / n;
            expected += w * rows[i] * cols[j] / (n * n);
        }
    }
    (expected > 0.0).then(|| 1.0 - observed / expected)
}

/// Every turn estimate is compared with the human label of its post.
pub fn compare_with_human(
    estimates: &[(String, DistressLevel)],
    human: &BTreeMap<String, DistressLevel>,
) -> Result<HumanComparison, ProbeError> {
    let mut confusion = [[0usize; 3]; 3];
    for (post_id, est) in estimates {
        if let Some(h) = human.get(post_id) {
            confusion[h.index()][est.index()] += 1;
        }
    }
    let n: usize = confusion.iter().flatten().sum();
    if n == 0 {
        return Err(ProbeError::NoOverlap);
    }
    let exact: usize = (0..3).map(|k| confusion[k][k]).sum();
    let mut row_shares = [[0.0; 3]; 3];
    for (shares, row) in row_shares.iter_mut().zip(&confusion) {
        let total: usize = row.iter().sum();
        if total > 0 {
            for (s, &c) in shares.iter_mut().zip(row) {
                *s = c as f64 / total as f64;
            }
        }
    }
    Ok(HumanComparison {
        n,
        exact_match_rate: exact as f64 / n as f64,
        quadratic_weighted_kappa: quadratic_weighted_kappa(&confusion),
        confusion,
        row_shares,
    })
}
