use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::special::normal_two_sided_p;
use super::StatsError;

pub const MAX_IRLS_ITER: usize = 100;
pub const IRLS_TOL: f64 = 1e-8;
/// Linear predictors beyond this magnitude count as fitted 0/1 probabilities.
const SEPARATION_ETA: f64 = 30.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn bernoulli_log_likelihood(eta: &DVector<f64>, y: &[f64]) -> f64 {
    eta.iter().zip(y).map(|(e, yi)| yi * e - softplus(*e)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub coefficients: Vec<f64>,
    /// Model-based standard errors from the inverse observed information.
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Complete or quasi-complete separation, or a constant outcome.
    pub separation: bool,
    pub n: usize,
}

impl LogitFit {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coefficients)
    }

    pub fn p_values(&self, std_errors: &[f64]) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(std_errors)
            .map(|(b, s)| normal_two_sided_p(b / s))
            .collect()
    }
}

pub(crate) fn check_inputs(x: &DMatrix<f64>, y: &[f64]) -> Result<(), StatsError> {
    if x.nrows() != y.len() {
        return Err(StatsError::Domain(format!(
            "design has {} rows but outcome has {}",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() <= x.ncols() {
        return Err(StatsError::TooFewRows {
            rows: x.nrows(),
            cols: x.ncols(),
        });
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(StatsError::Domain("outcome must be 0/1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Domain("design has non-finite entries".into()));
    }
    Ok(())
}

/// `X' diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut m = DMatrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            for b in 0..=a {
                m[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
    m
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares with step halving.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64]) -> Result<LogitFit, StatsError> {
    check_inputs(x, y)?;
    let n = x.nrows();
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let mut eta = x * &beta;
    let mut ll = bernoulli_log_likelihood(&eta, y);
    let mut iterations = 0;
    let mut converged = false;
    let mut singular = false;
    let yv = DVector::from_column_slice(y);
    while iterations < MAX_IRLS_ITER {
        iterations += 1;
        let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
        let info = weighted_gram(x, &w);
        let score = x.transpose() * (&yv - DVector::from_vec(mu));
        let Some(chol) = info.clone().cholesky() else {
            if iterations == 1 {
                return Err(StatsError::RankDeficient);
            }
            singular = true;
            break;
        };
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let cand_eta = x * &cand;
            let cand_ll = bernoulli_log_likelihood(&cand_eta, y);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                let change = (&cand - &beta).amax();
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                if change < IRLS_TOL {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted || converged {
            converged = converged || step.amax() < IRLS_TOL;
            break;
        }
    }
    let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
    let covariance = weighted_gram(x, &w).try_inverse();
    let all_same = y.iter().all(|&v| v == y[0]);
    let separation = all_same || singular || !converged || eta.iter().any(|e| e.abs() > SEPARATION_ETA);
    let cov = covariance.unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    Ok(LogitFit {
        coefficients: beta.iter().copied().collect(),
        std_errors: (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
        covariance: to_rows(&cov),
        log_likelihood: ll,
        iterations,
        converged,
        separation,
        n,
    })
}

/// Cluster-robust sandwich covariance with the `G / (G - 1)` factor.
pub fn clustered_covariance<S: AsRef<str>>(
    fit: &LogitFit,
    x: &DMatrix<f64>,
    y: &[f64],
    clusters: &[S],
) -> Result<DMatrix<f64>, StatsError> {
    check_inputs(x, y)?;
    if clusters.len() != y.len() {
        return Err(StatsError::Domain("one cluster id per row required".into()));
    }
    let p = x.ncols();
    let beta = fit.beta();
    let mut scores: BTreeMap<&str, DVector<f64>> = BTreeMap::new();
    let mut w = Vec::with_capacity(y.len());
    for (i, c) in clusters.iter().enumerate() {
        let row = x.row(i).transpose();
        let mu = sigmoid(row.dot(&beta));
        w.push(mu * (1.0 - mu));
        *scores.entry(c.as_ref()).or_insert_with(|| DVector::zeros(p)) += row * (y[i] - mu);
    }
    let g = scores.len();
    if g < 2 {
        return Err(StatsError::TooFewClusters { found: g, min: 2 });
    }
    let bread = weighted_gram(x, &w).try_inverse().ok_or(StatsError::RankDeficient)?;
    let mut meat = DMatrix::zeros(p, p);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    Ok(&bread * meat * &bread * (g as f64 / (g as f64 - 1.0)))
}

pub fn clustered_se<S: AsRef<str>>(
    fit: &LogitFit,
    x: &DMatrix<f64>,
    y: &[f64],
    clusters: &[S],
) -> Result<Vec<f64>, StatsError> {
    let v = clustered_covariance(fit, x, y, clusters)?;
    Ok((0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_matches_logit_of_mean() {
        let y: Vec<f64> = (0..40).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let x = DMatrix::from_element(40, 1, 1.0);
        let f = fit_logistic(&x, &y).unwrap();
        assert!((f.coefficients[0] - (1.0f64 / 3.0).ln()).abs() < 1e-10);
        assert!(f.converged && !f.separation);
        // model-based SE of a logit mean: 1 / sqrt(n p (1 - p))
        assert!((f.std_errors[0] - 1.0 / (40.0 * 0.25 * 0.75f64).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn constant_outcome_is_flagged_not_fatal() {
        let y = vec![1.0; 20];
        let x = DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let f = fit_logistic(&x, &y).unwrap();
        assert!(f.separation);
    }

    #[test]
    fn preconditions() {
        let x = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(fit_logistic(&x, &[0.0, 1.0]), Err(StatsError::TooFewRows { .. })));
        let x = DMatrix::from_fn(6, 2, |_, _| 1.0);
        assert!(matches!(
            fit_logistic(&x, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]),
            Err(StatsError::RankDeficient)
        ));
        let x = DMatrix::from_element(4, 1, 1.0);
        assert!(fit_logistic(&x, &[0.0, 2.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn single_cluster_rejected() {
        let y = vec![0.0, 1.0, 1.0, 0.0, 1.0];
        let x = DMatrix::from_element(5, 1, 1.0);
        let f = fit_logistic(&x, &y).unwrap();
        assert!(matches!(
            clustered_se(&f, &x, &y, &["a"; 5]),
            Err(StatsError::TooFewClusters { found: 1, .. })
        ));
    }
}
