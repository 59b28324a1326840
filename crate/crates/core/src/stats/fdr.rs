use serde::{Deserialize, Serialize};

use super::StatsError;

pub const DEFAULT_Q: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    /// Adjusted p-values in input order.
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Benjamini-Hochberg step-up adjustment.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<BhResult, StatsError> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p_values[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    let reject = adjusted.iter().map(|&a| a <= q).collect();
    Ok(BhResult { adjusted, reject })
}
