use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::special::chi2_sf;
use super::tidy::{Condition, TidyTurnRecord};
use super::StatsError;
use crate::ssbc::SsbcLabel;

pub const LOW_EXPECTED: f64 = 5.0;

/// Condition levels by {tag present, tag absent}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub levels: Vec<String>,
    pub counts: Vec<[u64; 2]>,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|r| r[0] + r[1]).sum()
    }

    /// Tag rate per level.
    pub fn rates(&self) -> BTreeMap<String, f64> {
        self.levels
            .iter()
            .zip(&self.counts)
            .map(|(l, r)| (l.clone(), r[0] as f64 / (r[0] + r[1]) as f64))
            .collect()
    }

    pub fn as_matrix(&self) -> Vec<Vec<f64>> {
        self.counts.iter().map(|r| vec![r[0] as f64, r[1] as f64]).collect()
    }

    /// True when the tag is never or always present.
    pub fn is_degenerate(&self) -> bool {
        let present: u64 = self.counts.iter().map(|r| r[0]).sum();
        present == 0 || present == self.total()
    }
}

pub fn contingency_table(
    records: &[TidyTurnRecord],
    tag: SsbcLabel,
    condition: Condition,
) -> Result<ContingencyTable, StatsError> {
    let levels = condition.levels(records);
    if levels.len() < 2 {
        return Err(StatsError::SingleLevel(condition.as_str().to_string()));
    }
    let pos: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![[0u64; 2]; levels.len()];
    for r in records {
        let row = pos[condition.level(r).as_str()];
        counts[row][usize::from(!r.has(tag))] += 1;
    }
    Ok(ContingencyTable { levels, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    pub min_expected: f64,
    pub low_expected_warning: bool,
}

/// Pearson chi-squared test of independence, no continuity correction.
pub fn chi_square(table: &[Vec<f64>]) -> Result<ChiSquare, StatsError> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(StatsError::Domain("table must be at least 2x2 and rectangular".into()));
    }
    if table.iter().flatten().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(StatsError::Domain("counts must be finite and non-negative".into()));
    }
    let rows: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if rows.iter().chain(&cols).any(|&m| m <= 0.0) {
        return Err(StatsError::ZeroMarginal);
    }
    let n: f64 = rows.iter().sum();
    let mut chi2 = 0.0;
    let mut min_expected = f64::INFINITY;
    for i in 0..r {
        for j in 0..c {
            let e = rows[i] * cols[j] / n;
            min_expected = min_expected.min(e);
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    let df = (r - 1) * (c - 1);
    Ok(ChiSquare {
        chi2,
        df,
        p: chi2_sf(chi2, df as f64),
        min_expected,
        low_expected_warning: min_expected < LOW_EXPECTED,
    })
}

pub fn cramers_v(chi2: f64, n: f64, rows: usize, cols: usize) -> Result<f64, StatsError> {
    if n.is_nan() || n <= 0.0 || rows.min(cols) < 2 || chi2.is_nan() || chi2 < 0.0 {
        return Err(StatsError::Domain(format!(
            "cramers_v needs n > 0, chi2 >= 0 and at least 2x2 (got n={n}, chi2={chi2}, {rows}x{cols})"
        )));
    }
    Ok((chi2 / (n * (rows.min(cols) - 1) as f64)).sqrt())
}

/// Spread of rates across levels in percentage points.
pub fn delta_pp(rates: &[f64]) -> Result<f64, StatsError> {
    if rates.len() < 2 {
        return Err(StatsError::Domain("delta_pp needs at least two levels".into()));
    }
    let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((max - min) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyResult {
    pub tag: SsbcLabel,
    pub condition: Condition,
    pub table: ContingencyTable,
    pub n: u64,
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    pub p_fdr: f64,
    pub significant: bool,
    pub cramers_v: f64,
    pub delta_pp: f64,
    pub per_level_rates: BTreeMap<String, f64>,
    pub min_expected: f64,
    pub low_expected_warning: bool,
}

/// Test one tag; `p_fdr` is filled in by the caller across tags.
pub fn test_tag(
    records: &[TidyTurnRecord],
    tag: SsbcLabel,
    condition: Condition,
) -> Result<ContingencyResult, StatsError> {
    let table = contingency_table(records, tag, condition)?;
    if table.is_degenerate() {
        return Err(StatsError::Degenerate(tag));
    }
    let test = chi_square(&table.as_matrix())?;
    let n = table.total();
    let v = cramers_v(test.chi2, n as f64, table.levels.len(), 2)?;
    let per_level_rates = table.rates();
    let rates: Vec<f64> = per_level_rates.values().copied().collect();
    Ok(ContingencyResult {
        tag,
        condition,
        n,
        chi2: test.chi2,
        df: test.df,
        p: test.p,
        p_fdr: test.p,
        significant: false,
        cramers_v: v,
        delta_pp: delta_pp(&rates)?,
        per_level_rates,
        min_expected: test.min_expected,
        low_expected_warning: test.low_expected_warning,
        table,
    })
}
